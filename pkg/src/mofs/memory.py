"""Key-value memory of previously seen operator features.

Keys and values are spatial mean-pools of the gated ``a`` and ``u`` features;
each entry carries a quality score ``exp(-L2)`` from the prediction it was
inserted with. Retrieval ranks entries by inner product with a projected
query, keeps the top ``k`` and softmax-weights them by
``similarity / tau + alpha * quality`` within that set.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyMemoryError

__all__ = ["MemoryEntry", "MemoryBuffer", "MemoryReadout", "quality_from_loss"]

SELF_MATCH_COSINE = 0.9999


def quality_from_loss(l2: float) -> float:
    return math.exp(-float(l2))


@dataclass(frozen=True)
class MemoryEntry:
    key: torch.Tensor
    value: torch.Tensor
    quality: float
    operator_id: int
    insert_seq: int
    tag: Hashable = None


class MemoryBuffer:
    """Bounded FIFO store. Stored tensors are detached copies."""

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[MemoryEntry] = deque()
        self._seq = 0
        self._stack = None

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, key, value, quality: float, operator_id: int, tag: Hashable = None) -> None:
        key = torch.as_tensor(key).detach().reshape(-1).clone()
        value = torch.as_tensor(value).detach().reshape(-1).clone()
        if key.shape != value.shape:
            raise ValueError("key and value must have the same width")
        if not (torch.isfinite(key).all() and torch.isfinite(value).all()):
            raise ValueError("refusing to store a non-finite memory vector")
        if not 0.0 < quality <= 1.0:
            raise ValueError(f"quality must lie in (0, 1], got {quality}")
        if self.entries and key.shape != self.entries[0].key.shape:
            raise ValueError("memory vectors must share one width")
        self.entries.append(MemoryEntry(key, value, float(quality), int(operator_id), self._seq, tag))
        self._seq += 1
        while len(self.entries) > self.capacity:
            self.entries.popleft()
        self._stack = None

    def insert_batch(self, keys, values, qualities: Sequence[float], operator_ids: Sequence[int],
                     tags: Sequence[Hashable] | None = None) -> None:
        tags = tags if tags is not None else [None] * len(qualities)
        for k, v, q, o, t in zip(keys, values, qualities, operator_ids, tags):
            self.insert(k, v, q, o, t)

    def stacked(self):
        """``(keys (n,d), values (n,d), quality (n,))`` as tensors."""
        if not self.entries:
            raise EmptyMemoryError("memory buffer is empty")
        if self._stack is None:
            self._stack = (
                torch.stack([e.key for e in self.entries]),
                torch.stack([e.value for e in self.entries]),
                torch.tensor([e.quality for e in self.entries], dtype=self.entries[0].key.dtype),
            )
        return self._stack

    def keys(self) -> torch.Tensor:
        return self.stacked()[0]

    # -- persistence ---------------------------------------------------
    def state(self) -> dict:
        if not self.entries:
            return {"capacity": self.capacity, "seq": self._seq}
        keys, values, quality = self.stacked()
        return {
            "capacity": self.capacity,
            "seq": self._seq,
            "keys": keys,
            "values": values,
            "quality": quality,
            "operator_id": torch.tensor([e.operator_id for e in self.entries], dtype=torch.float32),
            "insert_seq": torch.tensor([e.insert_seq for e in self.entries], dtype=torch.float32),
        }

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBuffer":
        buf = cls(int(state["capacity"]))
        if "keys" in state:
            for k, v, q, o, s in zip(state["keys"], state["values"], state["quality"],
                                     state["operator_id"], state["insert_seq"]):
                buf.entries.append(MemoryEntry(k.clone(), v.clone(), float(q), int(o), int(s)))
        buf._seq = int(state["seq"])
        return buf


class MemoryReadout(nn.Module):
    """Learnable parts of the memory path: query projection and merge gate."""

    def __init__(self, d: int, k: int = 4, tau: float = 0.1, alpha_qual: float = 1.0):
        super().__init__()
        self.W_q = nn.Linear(d, d, bias=False)
        with torch.no_grad():
            self.W_q.weight.copy_(torch.eye(d) + 0.02 * torch.randn(d, d))
        self.W_m = nn.Linear(2 * d, 1, bias=False)
        self.k = k
        self.tau = tau
        self.alpha_qual = alpha_qual

    def project(self, f_q: torch.Tensor) -> torch.Tensor:
        return self.W_q(f_q)

    def retrieve(self, f_q: torch.Tensor, memory: MemoryBuffer, k: int | None = None,
                 tau: float | None = None, alpha_qual: float | None = None,
                 exclude_keys: torch.Tensor | None = None,
                 exclude_tags: Sequence[Hashable] | None = None):
        """Weighted key/value readout for pooled queries ``f_q`` of shape ``(B, d)``.

        Returns ``(z_a, z_u, weights, indices)``; rows whose candidate set is
        empty (after self-match exclusion) get zero readouts and zero weights.
        Raises :class:`EmptyMemoryError` when the buffer holds nothing.
        """
        k = self.k if k is None else k
        tau = self.tau if tau is None else tau
        alpha_qual = self.alpha_qual if alpha_qual is None else alpha_qual
        if tau <= 0:
            raise ValueError("retrieval temperature must be positive")
        single = f_q.dim() == 1
        if single:
            f_q = f_q.unsqueeze(0)
        keys, values, quality = memory.stacked()
        keys = keys.to(f_q.dtype)
        values = values.to(f_q.dtype)
        quality = quality.to(f_q.dtype)
        sims = self.project(f_q) @ keys.T  # (B, n)

        valid = torch.ones_like(sims, dtype=torch.bool)
        if exclude_keys is not None:
            cos = F.normalize(exclude_keys.to(keys.dtype), dim=-1) @ F.normalize(keys, dim=-1).T
            valid &= cos <= SELF_MATCH_COSINE
        if exclude_tags is not None:
            entry_tags = [e.tag for e in memory.entries]
            for b, tag in enumerate(exclude_tags):
                if tag is not None:
                    for j, et in enumerate(entry_tags):
                        if et == tag:
                            valid[b, j] = False

        kk = min(k, keys.shape[0])
        ranked = sims.masked_fill(~valid, float("-inf"))
        top_sims, idx = torch.topk(ranked, kk, dim=-1)
        logits = top_sims / tau + alpha_qual * quality[idx]
        ok = torch.isfinite(top_sims)
        logits = logits.masked_fill(~ok, float("-inf"))
        any_ok = ok.any(dim=-1, keepdim=True)
        w = torch.softmax(logits.masked_fill(~any_ok, 0.0), dim=-1) * any_ok
        z_a = (w.unsqueeze(-1) * keys[idx]).sum(dim=1)
        z_u = (w.unsqueeze(-1) * values[idx]).sum(dim=1)
        if single:
            return z_a[0], z_u[0], w[0], idx[0]
        return z_a, z_u, w, idx

    def merge(self, f_hat: torch.Tensor, z_a: torch.Tensor) -> torch.Tensor:
        """``f_hat + sigmoid(W_m [f_hat; z_a]) * z_a`` for every token of ``f_hat``."""
        z = z_a.unsqueeze(-2).expand_as(f_hat)
        g = torch.sigmoid(self.W_m(torch.cat([f_hat, z], dim=-1)))
        return f_hat + g * z
