from __future__ import annotations

import math
from typing import Iterable

import torch


class Optimizer:
    """Adam with cosine decay to zero and global gradient-norm clipping."""

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float = 1e-3, total_steps: int = 1000,
                 clip: float | None = 1.0, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.opt = torch.optim.Adam(self.params, lr=lr, weight_decay=weight_decay)
        total = max(1, int(total_steps))
        self.sched = torch.optim.lr_scheduler.LambdaLR(
            self.opt, lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total) / total))
        )
        self.clip = clip

    def step(self, loss: torch.Tensor) -> float:
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        norm = 0.0
        if self.clip is not None and self.params:
            norm = float(torch.nn.utils.clip_grad_norm_(self.params, self.clip))
        self.opt.step()
        self.sched.step()
        return norm
