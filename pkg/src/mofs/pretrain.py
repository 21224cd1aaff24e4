"""Masked spatial reconstruction + spectrum-magnitude prediction for the encoder."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import OperatorDataset
from .errors import NumericalError
from .fno import FNOEncoder, dft2
from .optim import Optimizer

log = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class MaskPair:
    M_a: torch.Tensor
    M_u: torch.Tensor
    rho: float


def apply_mask(a: torch.Tensor, u: torch.Tensor, rho: float, seed: int | torch.Generator = 0):
    """Zero a random fraction ``rho`` of pixels (independently for ``a`` and ``u``).

    Each pixel is kept with probability ``1 - rho``. Returns ``(a_masked,
    u_masked, MaskPair)``; masks are float tensors of 0/1 shaped like ``a``.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("masking ratio must lie in [0, 1)")
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    a = torch.as_tensor(a)
    u = torch.as_tensor(u)
    M_a = (torch.rand(a.shape, generator=g) >= rho).to(a.dtype)
    M_u = (torch.rand(u.shape, generator=g) >= rho).to(u.dtype)
    return a * M_a, u * M_u, MaskPair(M_a, M_u, rho)


def _reduce(num: torch.Tensor, den: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "pooled":
        return num.sum() / den.sum()
    ratio = num / den
    if reduction == "none":
        return ratio
    if reduction == "mean":
        return ratio.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def masked_ratio(x_hat, x, M, eps: float = EPS, reduction: str = "mean") -> torch.Tensor:
    """``||(1-M)(x_hat - x)||^2 / (||(1-M) x||^2 + eps)`` per sample (squared Frobenius)."""
    hidden = 1.0 - M
    dims = tuple(range(x.dim() - 2, x.dim()))
    num = ((hidden * (x_hat - x)) ** 2).sum(dim=dims)
    den = ((hidden * x) ** 2).sum(dim=dims)
    if reduction == "pooled":
        return num.sum() / (den.sum() + eps)
    return _reduce(num, den + eps, reduction)


def spatial_loss(a_hat, u_hat, a, u, masks: MaskPair, eps: float = EPS,
                 reduction: str = "mean") -> torch.Tensor:
    """Sum of the masked relative squared errors for ``a`` and ``u``.

    ``reduction="mean"`` averages the per-sample ratios; ``"pooled"`` sums
    numerators and denominators over the batch before dividing, which stays
    finite when an individual target is identically zero on its masked set.
    """
    return (masked_ratio(a_hat, a, masks.M_a, eps, reduction)
            + masked_ratio(u_hat, u, masks.M_u, eps, reduction))


def spectrum_magnitude(a: torch.Tensor) -> torch.Tensor:
    return dft2(a).abs()


def freq_loss(F_hat, a, eps: float = EPS, reduction: str = "mean") -> torch.Tensor:
    """``||F_hat - |DFT(a)| || / || |DFT(a)| ||`` (plain Frobenius, denominator floored at eps)."""
    target = spectrum_magnitude(a)
    dims = tuple(range(a.dim() - 2, a.dim()))
    num = ((F_hat - target) ** 2).sum(dim=dims)
    den = (target**2).sum(dim=dims)
    if reduction == "pooled":
        return num.sum().sqrt() / den.sum().sqrt().clamp_min(eps)
    return _reduce(num.sqrt(), den.sqrt().clamp_min(eps), reduction)


def _pointwise_mlp(c_in: int, hidden: int, c_out: int = 1, bias: bool = True) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, hidden, 1, bias=bias), nn.GELU(), nn.Conv2d(hidden, c_out, 1, bias=bias)
    )


class FrequencyDecoder(nn.Module):
    """Predict ``|DFT(a)|`` on the full grid from the magnitude spectrum of the latents."""

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.mlp = _pointwise_mlp(in_channels, hidden)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        H, W = f.shape[-2:]
        mag = dft2(f).abs() / (H * W) ** 0.5
        return self.mlp(mag).squeeze(1) * (H * W) ** 0.5


class PretrainHeads(nn.Module):
    """Spatial decoders for ``a`` and ``u`` plus the spectrum decoder; all read ``concat(f_a, f_u)``."""

    def __init__(self, d: int):
        super().__init__()
        self.psi_a = _pointwise_mlp(2 * d, d)
        self.psi_u = _pointwise_mlp(2 * d, d)
        self.freq = FrequencyDecoder(2 * d, d)

    def forward(self, f: torch.Tensor):
        return self.psi_a(f).squeeze(1), self.psi_u(f).squeeze(1), self.freq(f)


def pretrain_forward(encoder: FNOEncoder, heads: PretrainHeads, a, u, rho: float,
                     alpha_freq: float, seed, reduction: str = "pooled"):
    """One masked forward pass; returns ``(L_pretrain, L_spatial, L_freq, outputs)``."""
    a_m, u_m, masks = apply_mask(a, u, rho, seed)
    f = torch.cat([encoder(a_m), encoder(u_m)], dim=1)
    a_hat, u_hat, F_hat = heads(f)
    ls = spatial_loss(a_hat, u_hat, a, u, masks, reduction=reduction)
    lf = freq_loss(F_hat, a, reduction=reduction)
    total = ls + alpha_freq * lf
    return total, ls, lf, {"a_hat": a_hat, "u_hat": u_hat, "F_hat": F_hat, "masks": masks,
                           "a_masked": a_m, "u_masked": u_m}


def normalized_stack(datasets: Sequence[OperatorDataset]):
    """Normalize each dataset with its own statistics and stack all samples."""
    a, u, ids = [], [], []
    for ds in datasets:
        na, nu = ds.normalizers
        a.append(na.apply(ds.a.astype(np.float64)))
        u.append(nu.apply(ds.u.astype(np.float64)))
        ids += [ds.operator_id] * ds.n_samples
    return (torch.tensor(np.concatenate(a), dtype=torch.float32),
            torch.tensor(np.concatenate(u), dtype=torch.float32),
            torch.tensor(ids))


def interleaved_order(ids: torch.Tensor, g: torch.Generator) -> list[int]:
    """Shuffle within each operator, then round-robin across operators."""
    groups = []
    for k in torch.unique(ids).tolist():
        idx = torch.nonzero(ids == k).flatten()
        groups.append(idx[torch.randperm(len(idx), generator=g)].tolist())
    order = []
    for r in range(max(len(gr) for gr in groups)):
        order += [gr[r] for gr in groups if r < len(gr)]
    return order


@dataclass
class PretrainResult:
    encoder: FNOEncoder
    heads: PretrainHeads
    trace: list[dict] = field(default_factory=list)


def pretrain_epoch(a, u, ids, encoder, heads, rho: float, alpha_freq: float, optimizer: Optimizer,
                   batch_size: int, g: torch.Generator, epoch: int = 0) -> dict:
    """One pass over every sample of every operator; returns the epoch-mean losses."""
    order = interleaved_order(ids, g)
    parts = np.zeros(3)
    n = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=g))
        total, ls, lf, _ = pretrain_forward(encoder, heads, a[idx], u[idx], rho, alpha_freq, seed)
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite pretraining loss at epoch {epoch}, samples {idx}: "
                f"L_spatial={float(ls)}, L_freq={float(lf)}"
            )
        optimizer.step(total)
        parts += [float(ls.detach()), float(lf.detach()), float(total.detach())]
        n += 1
    ls, lf, tot = parts / max(n, 1)
    return {"epoch": epoch, "L_spatial": ls, "L_freq": lf, "L_pretrain": tot}


def pretrain(datasets: Sequence[OperatorDataset], encoder: FNOEncoder, epochs: int = 20,
             rho: float = 0.5, alpha_freq: float = 0.5, lr: float = 1e-3, batch_size: int = 8,
             seed: int = 0, heads: PretrainHeads | None = None) -> PretrainResult:
    if not datasets:
        raise ValueError("pretraining needs at least one dataset")
    torch.manual_seed(seed)
    heads = heads if heads is not None else PretrainHeads(encoder.d)
    a, u, ids = normalized_stack(datasets)
    steps = epochs * -(-len(ids) // batch_size)
    opt = Optimizer(list(encoder.parameters()) + list(heads.parameters()), lr=lr, total_steps=steps)
    g = torch.Generator().manual_seed(seed)
    trace = []
    encoder.train()
    heads.train()
    for ep in range(epochs):
        row = pretrain_epoch(a, u, ids, encoder, heads, rho, alpha_freq, opt, batch_size, g, ep)
        log.info("pretrain epoch %d: %s", ep, row)
        trace.append(row)
    return PretrainResult(encoder, heads, trace)


@torch.no_grad()
def evaluate_pretrain_loss(encoder, heads, a, u, rho: float, alpha_freq: float, seed: int = 1234) -> float:
    total, *_ = pretrain_forward(encoder, heads, a, u, rho, alpha_freq, seed)
    return float(total)
