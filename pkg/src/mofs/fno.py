"""Spectral encoder building blocks.

DFT convention used everywhere in the package: the forward transform is
unnormalized and the inverse carries the ``1/(H*W)`` factor (torch's
``norm="backward"``).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericalError

__all__ = ["dft2", "idft2", "SpectralConv2d", "FNOEncoder", "PositionalEncoding", "check_modes"]


def dft2(x) -> torch.Tensor:
    """Unnormalized 2D DFT over the last two axes."""
    x = torch.as_tensor(x)
    return torch.fft.fft2(x, norm="backward")


def idft2(X) -> torch.Tensor:
    return torch.fft.ifft2(torch.as_tensor(X), norm="backward")


def check_modes(modes1: int, modes2: int, H: int, W: int) -> None:
    # positive and negative row blocks must not overlap
    if modes1 < 1 or modes2 < 1:
        raise ConfigurationError("mode counts must be positive")
    if 2 * modes1 > H or modes2 > W // 2 + 1:
        raise ConfigurationError(
            f"modes ({modes1}, {modes2}) exceed what a {H}x{W} grid resolves "
            f"(need 2*m1 <= H and m2 <= W//2 + 1)"
        )


class SpectralConv2d(nn.Module):
    """Truncated Fourier multiplier plus a pointwise linear bypass.

    ``y = irfft2(R . rfft2(x)) + W x``. Rows ``[0, m1)`` and ``[H-m1, H)`` and
    columns ``[0, m2)`` of the half spectrum are multiplied by complex
    weights; every other mode is zeroed. The layer is linear in ``x`` and
    the inverse real transform keeps the output real.
    """

    def __init__(self, in_channels: int, out_channels: int, modes1: int, modes2: int,
                 grid: tuple[int, int] | None = None):
        super().__init__()
        if grid is not None:
            check_modes(modes1, modes2, *grid)
        elif modes1 < 1 or modes2 < 1:
            raise ConfigurationError("mode counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes1 = modes1
        self.modes2 = modes2
        scale = 1.0 / (in_channels * out_channels)
        shape = (in_channels, out_channels, modes1, modes2)
        self.weights_pos = nn.Parameter(scale * torch.rand(*shape, dtype=torch.cfloat))
        self.weights_neg = nn.Parameter(scale * torch.rand(*shape, dtype=torch.cfloat))
        self.bypass = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=False)

    def spectral(self, x: torch.Tensor) -> torch.Tensor:
        B, _, H, W = x.shape
        check_modes(self.modes1, self.modes2, H, W)
        m1, m2 = self.modes1, self.modes2
        x_ft = torch.fft.rfft2(x)
        wp, wn = self.weights_pos, self.weights_neg
        if x_ft.dtype != wp.dtype:
            wp, wn = wp.to(x_ft.dtype), wn.to(x_ft.dtype)
        out_ft = torch.zeros(B, self.out_channels, H, W // 2 + 1, dtype=x_ft.dtype, device=x.device)
        out_ft[:, :, :m1, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, :m1, :m2], wp)
        out_ft[:, :, H - m1:, :m2] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, H - m1:, :m2], wn)
        return torch.fft.irfft2(out_ft, s=(H, W))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.spectral(x) + self.bypass(x)


class FNOEncoder(nn.Module):
    """Pointwise lift to ``d`` channels followed by ``n_blocks`` GELU spectral blocks.

    Maps ``(B, in_channels, H, W) -> (B, d, H, W)`` for any grid with
    ``H, W >= 2 * max(modes)``; parameters do not depend on the resolution.
    """

    def __init__(self, d: int = 32, n_blocks: int = 4, modes: int | tuple[int, int] = 8,
                 in_channels: int = 1):
        super().__init__()
        m1, m2 = (modes, modes) if isinstance(modes, int) else modes
        self.d = d
        self.modes = (m1, m2)
        self.lift = nn.Conv2d(in_channels, d, kernel_size=1)
        self.blocks = nn.ModuleList(SpectralConv2d(d, d, m1, m2) for _ in range(n_blocks))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        h = self.lift(x)
        for i, block in enumerate(self.blocks):
            h = F.gelu(block(h))
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite activation after spectral block {i}")
        return h


class PositionalEncoding(nn.Module):
    """Learnable ``1 x d x H x W`` offset; bilinearly resized for other grids.

    Initialized at unit scale so positions are distinguishable to the
    attention layers from the first step.
    """

    def __init__(self, d: int, H: int, W: int, init_std: float = 1.0):
        super().__init__()
        self.P = nn.Parameter(init_std * torch.randn(1, d, H, W))

    def resized(self, H: int, W: int) -> torch.Tensor:
        if self.P.shape[-2:] == (H, W):
            return self.P
        return F.interpolate(self.P, size=(H, W), mode="bilinear", align_corners=False)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f + self.resized(*f.shape[-2:])
