"""Attention and fusion blocks.

Token layout: a ``(B, d, H, W)`` map becomes ``(B, H*W, d)`` tokens; pooled
vectors (text embedding, memory readouts) enter attention as one-token
sequences ``(B, 1, d)``.
"""
from __future__ import annotations

import math
import warnings

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, VisionBackboneUnavailable

LN_EPS = 1e-6

__all__ = [
    "to_tokens",
    "from_tokens",
    "ConvBackbone",
    "VisionEncoder",
    "GatedFusion",
    "CrossAttention",
    "FiLM",
    "SelfAttentionBlock",
    "GradientCrossAttention",
]


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """``(B, d, H, W) -> (B, H*W, d)``."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(t: torch.Tensor, H: int, W: int) -> torch.Tensor:
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], H, W)


def as_sequence(x: torch.Tensor) -> torch.Tensor:
    """Promote ``(B, d)`` vectors to one-token sequences."""
    return x.unsqueeze(1) if x.dim() == 2 else x


# --------------------------------------------------------------------------
# vision
# --------------------------------------------------------------------------

class ConvBackbone(nn.Module):
    """Four 3x3 conv layers (replicate padding, GELU) at full resolution."""

    def __init__(self, width: int = 16, in_channels: int = 1):
        super().__init__()
        chans = [in_channels, width, width, width, width]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, padding_mode="replicate") for i in range(4)
        )
        self.out_channels = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.gelu(conv(x))
        return x


class ResNetBackbone(nn.Module):
    """Frozen ResNet-18 trunk (stem + layer1 + layer2) in inference mode."""

    out_channels = 128

    def __init__(self, weights_path: str):
        super().__init__()
        import torchvision

        net = torchvision.models.resnet18(weights=None)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
        self.trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2)
        self.trunk.eval()
        for p in self.trunk.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        self.trunk.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x.expand(-1, 3, -1, -1))


class VisionEncoder(nn.Module):
    """Image-feature branch: backbone -> 1x1 projection to ``d`` -> bilinear resize."""

    def __init__(self, d: int, backbone: str = "conv", weights_path: str | None = None,
                 strict: bool = False, width: int | None = None):
        super().__init__()
        self.backbone_name = backbone
        if backbone == "resnet18":
            try:
                if not weights_path:
                    raise FileNotFoundError("no ResNet-18 weights path configured")
                self.backbone = ResNetBackbone(weights_path)
            except (FileNotFoundError, OSError, RuntimeError, ImportError) as exc:
                if strict:
                    raise VisionBackboneUnavailable(str(exc)) from exc
                warnings.warn(f"ResNet-18 unavailable ({exc}); using the conv fallback", RuntimeWarning)
                self.backbone_name = "conv"
                self.backbone = ConvBackbone(width or d)
        elif backbone == "conv":
            self.backbone = ConvBackbone(width or d)
        else:
            raise ConfigurationError(f"unknown vision backbone {backbone!r}")
        self.proj = nn.Conv2d(self.backbone.out_channels, d, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        H, W = x.shape[-2:]
        h = self.proj(self.backbone(x))
        if h.shape[-2:] != (H, W):
            h = F.interpolate(h, size=(H, W), mode="bilinear", align_corners=False)
        return h


# --------------------------------------------------------------------------
# fusion and attention
# --------------------------------------------------------------------------

class GatedFusion(nn.Module):
    """``g = sigmoid(W [f; v])`` per token, output ``g f + (1 - g) v``."""

    def __init__(self, d: int):
        super().__init__()
        self.W = nn.Linear(2 * d, 1, bias=False)

    def gate(self, f: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.W(torch.cat([f, v], dim=-1)))

    def forward(self, f: torch.Tensor, v: torch.Tensor | None) -> torch.Tensor:
        if v is None:
            return f
        g = self.gate(f, v)
        return g * f + (1.0 - g) * v


class CrossAttention(nn.Module):
    """Multi-head attention without biases; queries keep their length.

    With ``null_kv=True`` a learnable token is appended to every key/value
    sequence, so attention over a single context vector still has a choice
    (and the query/key projections a gradient).
    """

    def __init__(self, d: int, heads: int = 4, null_kv: bool = False):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_h = d // heads
        self.W_q = nn.Linear(d, d, bias=False)
        self.W_k = nn.Linear(d, d, bias=False)
        self.W_v = nn.Linear(d, d, bias=False)
        self.W_o = nn.Linear(d, d, bias=False)
        self.null = nn.Parameter(0.02 * torch.randn(d)) if null_kv else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.heads, self.d_h).transpose(1, 2)

    def forward(self, q: torch.Tensor, kv: torch.Tensor | None = None, return_weights: bool = False):
        q = as_sequence(q)
        kv = q if kv is None else as_sequence(kv)
        if self.null is not None:
            kv = torch.cat([kv, self.null.to(kv.dtype).expand(kv.shape[0], 1, -1)], dim=1)
        Q, K, V = self._split(self.W_q(q)), self._split(self.W_k(kv)), self._split(self.W_v(kv))
        A = torch.softmax(Q @ K.transpose(-1, -2) / math.sqrt(self.d_h), dim=-1)
        out = (A @ V).transpose(1, 2).reshape(q.shape[0], q.shape[1], self.d)
        out = self.W_o(out)
        return (out, A) if return_weights else out


class FiLM(nn.Module):
    """``gamma(c) * x + beta(c)``; initialized near the identity modulation."""

    def __init__(self, d: int, init_std: float = 0.02):
        super().__init__()
        self.gamma = nn.Linear(d, d)
        self.beta = nn.Linear(d, d)
        with torch.no_grad():
            self.gamma.weight.normal_(0.0, init_std)
            self.gamma.bias.fill_(1.0)
            self.beta.weight.normal_(0.0, init_std)
            self.beta.bias.zero_()

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if c.dim() == x.dim() - 1:
            c = c.unsqueeze(-2)
        return self.gamma(c) * x + self.beta(c)


def _mlp(d: int, hidden: int, out: int | None = None) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, out or d))


class SelfAttentionBlock(nn.Module):
    """``Z = LN(x + attn(x)); out = LN(Z + MLP(Z))``."""

    def __init__(self, d: int, heads: int = 4, mlp_ratio: int = 2):
        super().__init__()
        self.attn = CrossAttention(d, heads)
        self.ln1 = nn.LayerNorm(d, eps=LN_EPS)
        self.mlp = _mlp(d, mlp_ratio * d)
        self.ln2 = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.ln1(x + self.attn(x, x))
        return self.ln2(z + self.mlp(z))


class GradientCrossAttention(nn.Module):
    """Single-head attention read-out used as a descent step on the normalized query.

    ``Qn, Kn, Vn = LN(q), LN(kv), LN(kv)``;
    ``H = softmax(Qn Kn^T / sqrt(d)) Vn``; output ``LN(Qn - eta * MLP(H))``.
    """

    def __init__(self, d: int, eta: float = 0.1):
        super().__init__()
        self.d = d
        self.ln_q = nn.LayerNorm(d, eps=LN_EPS)
        self.ln_k = nn.LayerNorm(d, eps=LN_EPS)
        self.ln_v = nn.LayerNorm(d, eps=LN_EPS)
        self.mlp = _mlp(d, d)
        self.eta = nn.Parameter(torch.tensor(float(eta)))
        self.ln_out = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, q: torch.Tensor, kv: torch.Tensor, return_weights: bool = False):
        q, kv = as_sequence(q), as_sequence(kv)
        Qn, Kn, Vn = self.ln_q(q), self.ln_k(kv), self.ln_v(kv)
        A = torch.softmax(Qn @ Kn.transpose(-1, -2) / math.sqrt(self.d), dim=-1)
        H = A @ Vn
        out = self.ln_out(Qn - self.eta * self.mlp(H))
        return (out, A) if return_weights else out
