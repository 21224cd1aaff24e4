"""Run configuration shared by training, evaluation and the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .model import ModelConfig

ABLATION_FLAGS = ("no_vision", "no_text", "no_memory", "no_pretrain")


@dataclass(frozen=True)
class TrainConfig:
    # data
    grid: int = 16
    n_samples: int = 10
    # architecture
    d: int = 16
    n_blocks: int = 3
    modes: int = 4
    heads: int = 4
    L_p: int = 4
    d_bert: int = 64
    vision_backbone: str = "conv"
    vision_weights: str | None = None
    strict_vision: bool = False
    # pretraining
    rho: float = 0.5
    alpha_freq: float = 0.5
    pretrain_epochs: int = 5
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 8
    # memory
    tau: float = 0.1
    alpha_qual: float = 1.0
    k: int = 4
    memory_capacity: int = 256
    # contrastive
    tau_c: float = 0.07
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    lambda4: float = 0.01
    # few-shot training
    J: int = 4
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    clip: float = 1.0
    seed: int = 0
    # baselines
    baseline_epochs: int = 200
    # ablations
    no_vision: bool = False
    no_text: bool = False
    no_memory: bool = False
    no_pretrain: bool = False

    def __post_init__(self):
        positive = ("grid", "n_samples", "d", "n_blocks", "modes", "heads", "d_bert", "J", "k",
                    "memory_capacity", "batch_size", "tau", "tau_c", "lr", "pretrain_lr")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        nonneg = ("L_p", "alpha_freq", "alpha_qual", "lambda1", "lambda2", "lambda3", "lambda4",
                  "pretrain_epochs", "stage1_epochs", "stage2_epochs", "baseline_epochs")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigurationError("rho must lie in [0, 1)")
        if self.J >= self.n_samples:
            raise ConfigurationError("J demonstrations must leave at least one query per operator")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            grid=(self.grid, self.grid), d=self.d, n_blocks=self.n_blocks, modes=self.modes,
            heads=self.heads, L_p=self.L_p, d_bert=self.d_bert, k=self.k, tau=self.tau,
            alpha_qual=self.alpha_qual, memory_capacity=self.memory_capacity,
            vision_backbone=self.vision_backbone, vision_weights=self.vision_weights,
            strict_vision=self.strict_vision, no_vision=self.no_vision, no_text=self.no_text,
            no_memory=self.no_memory,
        )

    def with_flags(self, flags) -> "TrainConfig":
        flags = set(flags or ())
        unknown = flags - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigurationError(f"unknown ablation flags {sorted(unknown)}")
        return replace(self, **{f: (f in flags) for f in ABLATION_FLAGS})

    def override(self, **kwargs) -> "TrainConfig":
        names = {f.name for f in fields(self)}
        bad = set(kwargs) - names
        if bad:
            raise ConfigurationError(f"unknown config keys {sorted(bad)}")
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls().override(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        return cls.from_dict(data)
