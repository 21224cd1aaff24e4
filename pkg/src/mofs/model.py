"""End-to-end few-shot operator model.

Support pairs ``(a, u)`` are encoded, fused with vision features and the
operator's text embedding, and refined by gradient cross-attention against
the ``u`` features. The query is encoded on its own, conditioned on the
operator ID embedding and on a memory readout, and the decoder attends
from the support tokens (plus the operator's soft prompt) to the query.

Every forward pass works on normalized fields; :meth:`MOFSModel.predict`
maps the output back with the operator's ``u`` normalizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError, EmptyMemoryError
from .fno import FNOEncoder, PositionalEncoding, check_modes
from .fusion import (
    CrossAttention,
    FiLM,
    GatedFusion,
    GradientCrossAttention,
    SelfAttentionBlock,
    VisionEncoder,
    _mlp,
    to_tokens,
)
from .memory import MemoryBuffer, MemoryReadout
from .text import TextProjection

__all__ = ["ModelConfig", "OperatorContext", "MOFSModel"]


@dataclass
class ModelConfig:
    grid: tuple[int, int] = (32, 32)
    d: int = 32
    n_blocks: int = 4
    modes: int = 8
    heads: int = 4
    L_p: int = 4
    d_bert: int = 64
    eta: float = 0.1
    k: int = 4
    tau: float = 0.1
    alpha_qual: float = 1.0
    memory_capacity: int = 256
    vision_backbone: str = "conv"
    vision_weights: str | None = None
    strict_vision: bool = False
    no_vision: bool = False
    no_text: bool = False
    no_memory: bool = False

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigurationError(f"width {self.d} must be a positive multiple of heads={self.heads}")
        if self.L_p < 0:
            raise ConfigurationError("soft prompt length must be nonnegative")
        check_modes(self.modes, self.modes, *self.grid)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["grid"] = list(self.grid)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class OperatorContext:
    """Per-operator conditioning. ``text_features`` are pooled encoder states, one row per sample."""

    operator_id: int
    text_features: torch.Tensor
    soft_prompt: torch.Tensor
    id_embedding: torch.Tensor
    trainable: bool = True
    meta: dict = field(default_factory=dict)


class MOFSModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None, **overrides):
        super().__init__()
        cfg = config or ModelConfig()
        if overrides:
            cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
        self.config = cfg
        d, H, W = cfg.d, *cfg.grid

        # encoder
        self.encoder = FNOEncoder(d, cfg.n_blocks, cfg.modes)
        self.pos = PositionalEncoding(d, H, W)
        self.vision = VisionEncoder(d, cfg.vision_backbone, cfg.vision_weights, cfg.strict_vision)
        # fusion
        self.gate_a = GatedFusion(d)
        self.gate_u = GatedFusion(d)
        self.gate_q = GatedFusion(d)
        self.text_proj = TextProjection(cfg.d_bert, d)
        self.text_attn = CrossAttention(d, cfg.heads, null_kv=True)
        self.text_film = FiLM(d)
        self.sab = SelfAttentionBlock(d, cfg.heads)
        self.support_gca = GradientCrossAttention(d, cfg.eta)
        self.mem_attn = CrossAttention(d, cfg.heads, null_kv=True)
        self.mem_film = FiLM(d)
        # memory
        self.readout = MemoryReadout(d, cfg.k, cfg.tau, cfg.alpha_qual)
        self.memory = MemoryBuffer(cfg.memory_capacity)
        # decoder
        self.gamma_dec = nn.Linear(d, d)
        self.beta_dec = nn.Linear(d, d)
        self.decoder_gca = GradientCrossAttention(d, cfg.eta)
        self.head = _mlp(d, d, 1)
        # operator contexts
        self.soft_prompts = nn.ParameterDict()
        self.id_embeddings = nn.ParameterDict()
        self.text_features: dict[int, torch.Tensor] = {}
        self._frozen_contexts: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    # ------------------------------------------------------------------
    # operator contexts
    # ------------------------------------------------------------------
    def register_operator(self, operator_id: int, text_features: torch.Tensor) -> None:
        """Create (or refresh the text of) a trainable context."""
        key = str(int(operator_id))
        self.text_features[int(operator_id)] = torch.as_tensor(text_features, dtype=torch.float32).detach()
        if key not in self.soft_prompts:
            d = self.config.d
            self.soft_prompts[key] = nn.Parameter(0.02 * torch.randn(self.config.L_p, d))
            self.id_embeddings[key] = nn.Parameter(0.02 * torch.randn(d))

    def register_unseen_operator(self, operator_id: int, text_features: torch.Tensor) -> None:
        """Frozen context for an operator never trained on: mean of the trained contexts."""
        if not len(self.soft_prompts):
            raise ConfigurationError("no trained operator contexts to average")
        self.text_features[int(operator_id)] = torch.as_tensor(text_features, dtype=torch.float32).detach()
        P = torch.stack([p.detach() for p in self.soft_prompts.values()]).mean(0)
        e = torch.stack([p.detach() for p in self.id_embeddings.values()]).mean(0)
        self._frozen_contexts[int(operator_id)] = (P, e)

    @property
    def operator_ids(self) -> list[int]:
        return sorted(self.text_features)

    def context(self, operator_id: int) -> OperatorContext:
        k = int(operator_id)
        if k not in self.text_features:
            raise KeyError(f"operator {k} has no registered context")
        if k in self._frozen_contexts:
            P, e = self._frozen_contexts[k]
            return OperatorContext(k, self.text_features[k], P, e, trainable=False)
        key = str(k)
        return OperatorContext(k, self.text_features[k], self.soft_prompts[key], self.id_embeddings[key])

    def _stack_context(self, op_ids: Sequence[int]):
        ctxs = [self.context(k) for k in op_ids]
        return (torch.stack([c.soft_prompt for c in ctxs]),
                torch.stack([c.id_embedding for c in ctxs]))

    def text_embedding(self, operator_id: int) -> torch.Tensor:
        """Operator-level text vector: projected per-sample features, averaged."""
        return self.text_proj(self.text_features[int(operator_id)]).mean(0)

    def sample_text_embedding(self, operator_id: int, index) -> torch.Tensor:
        return self.text_proj(self.text_features[int(operator_id)][index])

    # ------------------------------------------------------------------
    # encoders
    # ------------------------------------------------------------------
    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder latents ``(B, d, H, W)`` before positional encoding."""
        return self.encoder(x)

    def _branch(self, x: torch.Tensor, gate: GatedFusion) -> torch.Tensor:
        f_pos = to_tokens(self.pos(self.encoder(x)))
        if self.config.no_vision:
            return f_pos
        v = to_tokens(self.vision(x))
        return gate(f_pos, v)

    def encode_support(self, a: torch.Tensor, u: torch.Tensor, op_ids: Sequence[int] | None = None,
                       text: torch.Tensor | None = None):
        """``(f~_a, f~_u, f^_a)`` token maps for support pairs.

        ``text`` overrides the per-row text vectors (``(B, d)``); otherwise
        each row uses its operator's averaged text embedding.
        """
        f_a = self._branch(a, self.gate_a)
        f_u = self._branch(u, self.gate_u)
        h = f_a
        if not self.config.no_text:
            if text is None:
                if op_ids is None:
                    raise ConfigurationError("text fusion needs operator ids or explicit text vectors")
                text = torch.stack([self.text_embedding(k) for k in op_ids])
            fused = self.text_attn(f_a, text)
            h = self.text_film(f_a, fused)
        h = self.sab(h)
        f_hat = self.support_gca(h, f_u)
        return f_a, f_u, f_hat

    def encode_query(self, a_q: torch.Tensor):
        """Gated query tokens and their spatial mean."""
        f_q = self._branch(a_q, self.gate_q)
        return f_q, f_q.mean(dim=1)

    def memory_keys(self, a: torch.Tensor, u: torch.Tensor):
        """Pooled gated ``a``/``u`` features used as memory key and value."""
        return self._branch(a, self.gate_a).mean(1), self._branch(u, self.gate_u).mean(1)

    # ------------------------------------------------------------------
    # memory, conditioning, decoding
    # ------------------------------------------------------------------
    def retrieve(self, f_q_pooled: torch.Tensor, memory: MemoryBuffer | None = None,
                 exclude_tags=None):
        B, d = f_q_pooled.shape
        zeros = f_q_pooled.new_zeros(B, d)
        memory = self.memory if memory is None else memory
        if self.config.no_memory:
            return zeros, zeros, None
        try:
            z_a, z_u, w, _ = self.readout.retrieve(f_q_pooled, memory, exclude_tags=exclude_tags)
        except EmptyMemoryError:
            return zeros, zeros, None
        return z_a, z_u, w

    def condition_query(self, f_q: torch.Tensor, e_o: torch.Tensor, z_u: torch.Tensor) -> torch.Tensor:
        h = f_q + e_o.unsqueeze(-2)
        h = h + self.mem_attn(h, z_u)
        return self.mem_film(h, z_u)

    def decode(self, f_a: torch.Tensor, f_q: torch.Tensor, soft_prompt: torch.Tensor | None,
               grid: tuple[int, int] | None = None) -> torch.Tensor:
        """Per-token scalars for the ``n = H*W`` support positions, shape ``(B, n)``."""
        n = f_a.shape[1]
        H, W = grid or self.config.grid
        if H * W != n:
            raise ValueError(f"{n} tokens do not match a {H}x{W} grid")
        # positions are re-injected on both sides so support token i can find query token i
        P = to_tokens(self.pos.resized(H, W))
        seq = self.gamma_dec(f_a) + P
        kv = self.beta_dec(f_q) + P
        if soft_prompt is not None and soft_prompt.shape[-2] > 0:
            # prompt rows are discarded on output, so they also join the keys/values
            seq = torch.cat([seq, soft_prompt], dim=1)
            kv = torch.cat([kv, soft_prompt], dim=1)
        h = self.decoder_gca(seq, kv)
        return self.head(h[:, :n]).squeeze(-1)

    def forward(self, prompt_a: torch.Tensor, prompt_u: torch.Tensor, a_q: torch.Tensor,
                op_ids: Sequence[int], memory: MemoryBuffer | None = None,
                prompt_text: torch.Tensor | None = None, exclude_tags=None, return_aux: bool = False):
        """Normalized prediction for queries ``a_q (B,H,W)`` given prompts ``(B,J,H,W)``."""
        if prompt_a.dim() == 3:
            prompt_a, prompt_u = prompt_a.unsqueeze(0), prompt_u.unsqueeze(0)
        B, J, H, W = prompt_a.shape
        if J < 1:
            raise ValueError("few-shot requires at least one demonstration")
        if a_q.shape[0] != B or len(op_ids) != B:
            raise ValueError("prompts, queries and operator ids must share the batch size")
        rep = [k for k in op_ids for _ in range(J)]
        text = None
        if not self.config.no_text:
            text = prompt_text if prompt_text is not None else torch.stack([self.text_embedding(k) for k in op_ids])
            text = text.repeat_interleave(J, dim=0)
        _, _, f_hat = self.encode_support(prompt_a.reshape(B * J, H, W), prompt_u.reshape(B * J, H, W),
                                          rep, text)
        f_hat = f_hat.reshape(B, J, H * W, -1).mean(1)
        f_q, f_q_pool = self.encode_query(a_q)
        z_a, z_u, w = self.retrieve(f_q_pool, memory, exclude_tags)
        f_hat = self.readout.merge(f_hat, z_a)
        P, e_o = self._stack_context(op_ids)
        f_q = self.condition_query(f_q, e_o, z_u)
        out = self.decode(f_hat, f_q, P, (H, W)).reshape(B, H, W)
        if return_aux:
            return out, {"z_a": z_a, "z_u": z_u, "weights": w, "f_q": f_q_pool}
        return out

    @torch.no_grad()
    def predict(self, prompt_a, prompt_u, a_q, operator_id: int, normalizers, memory=None) -> torch.Tensor:
        """Physical-units prediction from physical-units prompts/queries for one operator."""
        na, nu = normalizers
        pa = torch.as_tensor(na.apply(prompt_a), dtype=torch.float32)
        pu = torch.as_tensor(nu.apply(prompt_u), dtype=torch.float32)
        q = torch.as_tensor(na.apply(a_q), dtype=torch.float32)
        B = q.shape[0]
        out = self(pa.expand(B, *pa.shape), pu.expand(B, *pu.shape), q, [operator_id] * B, memory)
        return torch.as_tensor(nu.invert(out.double()))
