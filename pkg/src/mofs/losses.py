"""Training objectives for the prompt-conditioned operator model."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-8

__all__ = [
    "LossWeights",
    "relative_l2",
    "curriculum_params",
    "similarity_matrix",
    "supcon_loss",
    "consistency_loss",
    "diversity_loss",
    "stage2_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 0.01

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def relative_l2(u_hat, u, eps: float = EPS, reduction: str = "mean") -> torch.Tensor:
    """``||u - u_hat|| / max(||u||, eps)`` per sample over the last two axes.

    A 1-D input is treated as a single sample.
    """
    u_hat, u = torch.as_tensor(u_hat), torch.as_tensor(u)
    if u.shape != u_hat.shape:
        raise ValueError(f"shape mismatch {tuple(u_hat.shape)} vs {tuple(u.shape)}")
    dims = tuple(range(max(u.dim() - 2, 0), u.dim()))
    num = torch.linalg.vector_norm(u - u_hat, dim=dims)
    den = torch.linalg.vector_norm(u, dim=dims).clamp_min(eps)
    ratio = num / den
    if reduction == "none":
        return ratio
    if reduction == "mean":
        return ratio.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def curriculum_params(t: float, T: float) -> tuple[float, float]:
    """Difficulty ``lambda_t = min(1, t / (0.3 T))`` and hard-negative threshold ``0.7 - 0.3 lambda_t``."""
    if T <= 0:
        raise ValueError("total epochs must be positive")
    if t < 0:
        raise ValueError("epoch index must be nonnegative")
    lam = min(1.0, t / (0.3 * T))
    return lam, 0.7 - 0.3 * lam


def similarity_matrix(z_a: torch.Tensor, z_u: torch.Tensor, tau: float) -> torch.Tensor:
    """Temperature-scaled cosine similarities ``S_ij = <z_a_i, z_u_j> / tau``."""
    return F.normalize(z_a, dim=-1) @ F.normalize(z_u, dim=-1).T / tau


def supcon_loss(z_a: torch.Tensor, z_u: torch.Tensor, labels, tau: float = 0.07,
                lam: float = 0.0, theta: float = 0.7) -> torch.Tensor:
    """Supervised contrastive loss with curriculum-weighted hard negatives.

    Per anchor ``i``: ``-log(sum_pos exp S_ij / (sum_{j!=i} exp S_ij + lam * sum_hard exp S_ij))``
    where positives share the anchor's label and hard negatives are
    differently-labelled columns with ``S_ij > theta``. Anchors without any
    positive are dropped from the average.
    """
    if tau <= 0:
        raise ValueError("contrastive temperature must be positive")
    B = z_a.shape[0]
    if B < 2 or z_u.shape[0] != B:
        raise ValueError("contrastive batches need at least two aligned rows")
    y = torch.as_tensor(labels).reshape(-1)
    S = similarity_matrix(z_a, z_u, tau)
    off_diag = ~torch.eye(B, dtype=torch.bool, device=S.device)
    same = (y[:, None] == y[None, :]).to(S.device)
    pos = same & off_diag
    hard = (~same) & (S.detach() > theta)
    valid = pos.any(dim=1)
    if not valid.any():
        warnings.warn("contrastive batch has no positive pairs; returning 0", RuntimeWarning)
        return S.sum() * 0.0

    neg_inf = torch.tensor(float("-inf"), dtype=S.dtype, device=S.device)
    log_num = torch.logsumexp(torch.where(pos, S, neg_inf), dim=1)
    log_all = torch.logsumexp(torch.where(off_diag, S, neg_inf), dim=1)
    if lam > 0 and hard.any():
        log_hard = torch.logsumexp(torch.where(hard, S, neg_inf), dim=1) + math.log(lam)
        log_den = torch.logaddexp(log_all, log_hard)
    else:
        log_den = log_all
    per_anchor = log_den - log_num
    return per_anchor[valid].mean()


def consistency_loss(z_a, z_u, e_text, z_mem_u, labels, weights: LossWeights = LossWeights(),
                     tau: float = 0.07, lam: float = 0.0, theta: float = 0.7) -> torch.Tensor:
    """``l1 Lc(z_a, z_u) + l2 Lc(z_u, e) + l3 Lc(z_a, z_mem_u)``; zero-weighted terms are skipped."""
    terms = [(weights.lambda1, z_a, z_u), (weights.lambda2, z_u, e_text), (weights.lambda3, z_a, z_mem_u)]
    total = z_a.sum() * 0.0
    for w, x, y in terms:
        if w:
            total = total + w * supcon_loss(x, y, labels, tau, lam, theta)
    return total


def diversity_loss(keys: torch.Tensor, lambda4: float = 0.01) -> torch.Tensor:
    """``lambda4`` times the mean squared inner product over distinct key pairs."""
    N = keys.shape[0]
    if N < 2:
        return keys.sum() * 0.0
    G = keys @ keys.T
    off = G.pow(2).sum() - G.diagonal().pow(2).sum()
    return lambda4 * off / (N * (N - 1))


def stage2_loss(pred_loss, consis, diversity):
    return pred_loss + consis + diversity
