"""Prompt-free operator-learning baselines: FNO, DeepONet, UNet, and the mean predictor."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericalError
from .fno import FNOEncoder
from .losses import relative_l2
from .optim import Optimizer

BASELINE_KINDS = ("fno", "deeponet", "unet")


def grid_coordinates(H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """``(2, H, W)`` cell-centre coordinates in ``[0, 1]``."""
    y = (torch.arange(H, dtype=dtype) + 0.5) / H
    x = (torch.arange(W, dtype=dtype) + 0.5) / W
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return torch.stack([xx, yy])


class FNOBaseline(nn.Module):
    """Spectral encoder on ``(a, x, y)`` followed by a pointwise decoder."""

    def __init__(self, d: int = 16, n_blocks: int = 3, modes: int = 4):
        super().__init__()
        self.encoder = FNOEncoder(d, n_blocks, modes, in_channels=3)
        self.decoder = nn.Sequential(nn.Conv2d(d, d, 1), nn.GELU(), nn.Conv2d(d, 1, 1))

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        B, H, W = a.shape
        grid = grid_coordinates(H, W, a.dtype).expand(B, -1, -1, -1)
        x = torch.cat([a.unsqueeze(1), grid], dim=1)
        return self.decoder(self.encoder(x)).squeeze(1)


class DeepONet(nn.Module):
    """Branch net on the flattened input field, trunk net on ``(x, y)``; inner-product output."""

    def __init__(self, grid: tuple[int, int], width: int = 64, p: int = 32):
        super().__init__()
        H, W = grid
        self.grid = (H, W)
        self.branch = nn.Sequential(nn.Linear(H * W, width), nn.GELU(), nn.Linear(width, width),
                                    nn.GELU(), nn.Linear(width, p))
        self.trunk = nn.Sequential(nn.Linear(2, width), nn.GELU(), nn.Linear(width, width),
                                   nn.GELU(), nn.Linear(width, p))
        self.bias = nn.Parameter(torch.zeros(()))

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        B, H, W = a.shape
        if (H, W) != self.grid:
            raise ConfigurationError(f"DeepONet was built for {self.grid}, got {(H, W)}")
        b = self.branch(a.reshape(B, -1))
        coords = grid_coordinates(H, W, a.dtype).reshape(2, -1).T
        t = self.trunk(coords)
        return (b @ t.T + self.bias).reshape(B, H, W)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="replicate"), nn.GELU(),
        nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="replicate"), nn.GELU(),
    )


class UNet(nn.Module):
    """Two-level encoder/decoder with skip connections."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.down1 = _conv_block(1, width)
        self.down2 = _conv_block(width, 2 * width)
        self.mid = _conv_block(2 * width, 4 * width)
        self.up2 = nn.ConvTranspose2d(4 * width, 2 * width, 2, stride=2)
        self.dec2 = _conv_block(4 * width, 2 * width)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.dec1 = _conv_block(2 * width, width)
        self.out = nn.Conv2d(width, 1, 1)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        H, W = a.shape[-2:]
        if H % 4 or W % 4:
            raise ConfigurationError("UNet baseline needs grid sides divisible by 4")
        x1 = self.down1(a.unsqueeze(1))
        x2 = self.down2(F.avg_pool2d(x1, 2))
        m = self.mid(F.avg_pool2d(x2, 2))
        y = self.dec2(torch.cat([self.up2(m), x2], dim=1))
        y = self.dec1(torch.cat([self.up1(y), x1], dim=1))
        return self.out(y).squeeze(1)


def make_baseline(kind: str, grid: tuple[int, int], d: int = 16, n_blocks: int = 3, modes: int = 4) -> nn.Module:
    if kind == "fno":
        return FNOBaseline(d, n_blocks, modes)
    if kind == "deeponet":
        return DeepONet(grid)
    if kind == "unet":
        return UNet(d)
    raise ConfigurationError(f"unknown baseline {kind!r}; choose from {BASELINE_KINDS}")


def train_baseline(kind: str, a: torch.Tensor, u: torch.Tensor, epochs: int = 200, lr: float = 1e-3,
                   batch_size: int = 8, seed: int = 0, d: int = 16, n_blocks: int = 3,
                   modes: int = 4) -> nn.Module:
    """Fit a baseline on normalized ``(a, u)`` stacks with the relative L2 loss."""
    torch.manual_seed(seed)
    model = make_baseline(kind, tuple(a.shape[-2:]), d, n_blocks, modes)
    n = a.shape[0]
    steps = epochs * -(-n // batch_size)
    opt = Optimizer(model.parameters(), lr=lr, total_steps=steps)
    g = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            loss = relative_l2(model(a[idx]), u[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"{kind} baseline diverged at epoch {epoch}")
            opt.step(loss)
    model.eval()
    return model


def mean_prediction(train_u: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pixelwise mean of normalized training outputs (to be mapped back with the test normalizer)."""
    return torch.cat(list(train_u)).double().mean(0)
