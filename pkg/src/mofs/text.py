"""Statistics -> sentence -> operator embedding.

Each dataset (or each sample) is summarized by field statistics, rendered
into a fixed sentence template, tokenized and encoded. Token states are
mean-pooled over the true (unpadded) length, projected to the model width
by ``W_p`` and averaged over the batch of sentences to give one vector per
operator.

Two encoders are provided. :class:`HashTextEncoder` is a deterministic,
download-free stand-in: each token maps to a seeded Gaussian vector and the
"encoder" is the identity. :class:`PretrainedTextEncoder` wraps a local
transformer checkpoint when one is available.
"""
from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, fields
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "FieldStatistics",
    "compute_statistics",
    "render_description",
    "describe_samples",
    "tokenize",
    "HashTextEncoder",
    "PretrainedTextEncoder",
    "TextProjection",
    "pool_hidden",
    "embed_operator",
]


@dataclass(frozen=True)
class FieldStatistics:
    mu_a: float
    sigma_a: float
    a_min: float
    a_max: float
    mu_u: float
    sigma_u: float
    u_min: float
    u_max: float
    mu_grad_u: float
    sigma_grad_u: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gradient_magnitude(u: np.ndarray) -> np.ndarray:
    """``sqrt(u_x^2 + u_y^2)`` with central differences in index units."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]
    gy, gx = np.gradient(u, axis=(1, 2))
    return np.sqrt(gx**2 + gy**2)


def compute_statistics(dataset_or_a, u: np.ndarray | None = None) -> FieldStatistics:
    """Statistics over all pixels of all samples.

    Accepts an :class:`~mofs.data.OperatorDataset` or raw ``a``/``u`` arrays
    shaped ``(H, W)`` or ``(N, H, W)``.
    """
    if u is None:
        a, u = dataset_or_a.a, dataset_or_a.u
    else:
        a = dataset_or_a
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if a.size == 0 or u.size == 0:
        raise ValueError("statistics need at least one sample")
    g = gradient_magnitude(u)
    return FieldStatistics(
        mu_a=float(a.mean()), sigma_a=float(a.std()), a_min=float(a.min()), a_max=float(a.max()),
        mu_u=float(u.mean()), sigma_u=float(u.std()), u_min=float(u.min()), u_max=float(u.max()),
        mu_grad_u=float(g.mean()), sigma_grad_u=float(g.std()),
    )


@lru_cache(maxsize=1)
def description_template() -> str:
    return resources.files("mofs").joinpath("templates/description.txt").read_text(encoding="utf-8")


def _fmt(x: float) -> str:
    return format(float(x), "#.4g")


def render_description(name: str, stats: FieldStatistics) -> str:
    values = {k: _fmt(v) for k, v in stats.as_dict().items()}
    return description_template().format(name=name, **values)


def describe_samples(name: str, a: np.ndarray, u: np.ndarray) -> list[str]:
    """One sentence per sample of an ``(N, H, W)`` stack."""
    return [render_description(name, compute_statistics(a[i], u[i])) for i in range(len(a))]


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[A-Za-z_]+|[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?|[^\sA-Za-z\d]")


def tokenize(text: str) -> list[str]:
    """Split on whitespace and punctuation; numeric literals stay whole."""
    return _TOKEN_RE.findall(text)


class TextEncoder(Protocol):
    d_bert: int
    max_length: int

    def encode(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return hidden states ``(B, L, d_bert)`` and attention mask ``(B, L)``."""


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, salt: int) -> tuple[float, ...]:
    digest = hashlib.blake2b(f"{salt}:{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return tuple(rng.standard_normal(dim).tolist())


class HashTextEncoder:
    """Deterministic offline encoder: token -> seeded Gaussian vector, identity body."""

    def __init__(self, d_bert: int = 64, max_length: int = 128, salt: int = 0):
        self.d_bert = d_bert
        self.max_length = max_length
        self.salt = salt

    def token_vector(self, token: str) -> np.ndarray:
        return np.asarray(_token_vector(token, self.d_bert, self.salt), dtype=np.float64)

    def encode(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        B, L = len(texts), self.max_length
        hidden = np.zeros((B, L, self.d_bert))
        mask = np.zeros((B, L))
        for i, text in enumerate(texts):
            toks = tokenize(text)
            if len(toks) > L:
                warnings.warn(f"description has {len(toks)} tokens; truncating to {L}", RuntimeWarning)
                toks = toks[:L]
            for j, tok in enumerate(toks):
                hidden[i, j] = self.token_vector(tok)
                mask[i, j] = 1.0
        return torch.from_numpy(hidden), torch.from_numpy(mask)


class PretrainedTextEncoder:
    """Local transformer checkpoint (e.g. a BERT directory); never downloads."""

    def __init__(self, path: str, max_length: int = 128):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(path, local_files_only=True)
        self.model = AutoModel.from_pretrained(path, local_files_only=True).eval()
        self.d_bert = int(self.model.config.hidden_size)
        self.max_length = max_length

    @torch.no_grad()
    def encode(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        batch = self.tokenizer(list(texts), padding="max_length", truncation=True,
                               max_length=self.max_length, return_tensors="pt")
        out = self.model(input_ids=batch["input_ids"], attention_mask=batch["attention_mask"])
        return out.last_hidden_state.double(), batch["attention_mask"].double()


def pool_hidden(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over unmasked token positions: ``(B, L, D), (B, L) -> (B, D)``."""
    denom = mask.sum(dim=1, keepdim=True).clamp_min(1.0)
    return (hidden * mask.unsqueeze(-1)).sum(dim=1) / denom


class TextProjection(nn.Module):
    """``W_p``: maps pooled encoder states to the model width."""

    def __init__(self, d_bert: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_bert, d) / d_bert**0.5)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return z.to(self.weight.dtype) @ self.weight


def pooled_text_features(texts: Sequence[str], encoder: TextEncoder) -> torch.Tensor:
    if len(texts) == 0:
        raise ValueError("need at least one description")
    hidden, mask = encoder.encode(texts)
    return pool_hidden(hidden, mask)


def embed_operator(texts: Sequence[str], encoder: TextEncoder, projection: TextProjection) -> torch.Tensor:
    """Batch of descriptions -> one ``d``-vector (pool, project, then batch-average)."""
    z = pooled_text_features(texts, encoder)
    return projection(z).mean(dim=0)
