"""Two-stage few-shot training.

Stage 1 trains everything except the lower encoder layers on the relative
L2 of episodic predictions; stage 2 unfreezes the whole model and adds the
contrastive consistency and key-diversity terms. Both stages insert every
processed query into the model's memory buffer after the forward pass.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import NormalizerStats, OperatorDataset
from .errors import NumericalError
from .fno import FNOEncoder
from .losses import (
    LossWeights,
    curriculum_params,
    diversity_loss,
    relative_l2,
    supcon_loss,
)
from .memory import quality_from_loss
from .model import MOFSModel
from .optim import Optimizer
from .pretrain import PretrainHeads, pretrain
from .text import HashTextEncoder, TextEncoder, describe_samples, pooled_text_features

log = logging.getLogger(__name__)

TRACE_FIELDS = ("stage", "epoch", "step", "L_pred", "L_c_au", "L_c_ue", "L_c_amem",
                "L_consis", "L_div", "total")


@dataclass
class OperatorTensors:
    """Normalized samples and per-sample text features of one operator."""

    operator_id: int
    name: str
    a: torch.Tensor
    u: torch.Tensor
    text: torch.Tensor
    normalizers: tuple[NormalizerStats, NormalizerStats]

    @property
    def n(self) -> int:
        return self.a.shape[0]


def prepare_operator(ds: OperatorDataset, text_encoder: TextEncoder,
                     normalizers: tuple[NormalizerStats, NormalizerStats] | None = None) -> OperatorTensors:
    na, nu = normalizers or ds.normalizers
    a = torch.tensor(na.apply(ds.a.astype(np.float64)), dtype=torch.float32)
    u = torch.tensor(nu.apply(ds.u.astype(np.float64)), dtype=torch.float32)
    text = pooled_text_features(describe_samples(ds.name, ds.a, ds.u), text_encoder).float()
    return OperatorTensors(ds.operator_id, ds.name, a, u, text, (na, nu))


def default_text_encoder(cfg: TrainConfig) -> HashTextEncoder:
    return HashTextEncoder(d_bert=cfg.d_bert)


# --------------------------------------------------------------------------
# model construction and freezing
# --------------------------------------------------------------------------

def pretrain_encoder(datasets: Sequence[OperatorDataset], cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    encoder = FNOEncoder(cfg.d, cfg.n_blocks, cfg.modes)
    result = pretrain(datasets, encoder, epochs=cfg.pretrain_epochs, rho=cfg.rho,
                      alpha_freq=cfg.alpha_freq, lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch,
                      seed=cfg.seed)
    return result


def build_model(cfg: TrainConfig, operators: Sequence[OperatorTensors],
                encoder_state: dict | None = None) -> MOFSModel:
    """Fresh model with one context per training operator.

    ``encoder_state`` (a pretrained encoder's ``state_dict``) is loaded
    unless the configuration disables pretraining.
    """
    torch.manual_seed(cfg.seed)
    model = MOFSModel(cfg.model_config())
    for op in sorted(operators, key=lambda o: o.operator_id):
        model.register_operator(op.operator_id, op.text)
    if encoder_state is not None and not cfg.no_pretrain:
        model.encoder.load_state_dict(encoder_state)
    return model


def frozen_encoder_parameters(model: MOFSModel) -> list[torch.nn.Parameter]:
    """Lift and every spectral block except the last."""
    enc = model.encoder
    params = list(enc.lift.parameters())
    for block in enc.blocks[:-1]:
        params += list(block.parameters())
    return params


def set_stage(model: MOFSModel, stage: int) -> None:
    for p in model.parameters():
        p.requires_grad_(True)
    if stage == 1:
        for p in frozen_encoder_parameters(model):
            p.requires_grad_(False)
    # a pretrained vision trunk stays frozen in every stage
    if model.vision.backbone_name == "resnet18":
        for p in model.vision.backbone.parameters():
            p.requires_grad_(False)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

@dataclass
class Episode:
    op_ids: list[int]
    index: list[int]
    prompt_a: torch.Tensor
    prompt_u: torch.Tensor
    a: torch.Tensor
    u: torch.Tensor

    @property
    def tags(self) -> list[tuple[int, int]]:
        return list(zip(self.op_ids, self.index))


def epoch_order(operators: Sequence[OperatorTensors], g: torch.Generator) -> list[tuple[int, int]]:
    """(operator position, sample index) pairs, shuffled per operator and interleaved."""
    groups = [[(p, int(i)) for i in torch.randperm(op.n, generator=g)] for p, op in enumerate(operators)]
    order = []
    for r in range(max(len(gr) for gr in groups)):
        order += [gr[r] for gr in groups if r < len(gr)]
    return order


def make_episode(operators: Sequence[OperatorTensors], items: Sequence[tuple[int, int]], J: int,
                 g: torch.Generator) -> Episode:
    pa, pu, qa, qu, ids, idx = [], [], [], [], [], []
    for p, i in items:
        op = operators[p]
        others = torch.tensor([j for j in range(op.n) if j != i])
        if len(others) < J:
            raise ValueError(f"operator {op.name} has too few samples for J={J} demonstrations")
        pick = others[torch.randperm(len(others), generator=g)[:J]]
        pa.append(op.a[pick])
        pu.append(op.u[pick])
        qa.append(op.a[i])
        qu.append(op.u[i])
        ids.append(op.operator_id)
        idx.append(i)
    return Episode(ids, idx, torch.stack(pa), torch.stack(pu), torch.stack(qa), torch.stack(qu))


# --------------------------------------------------------------------------
# losses on an episode
# --------------------------------------------------------------------------

def episode_losses(model: MOFSModel, ep: Episode, operators_by_id: dict[int, OperatorTensors],
                   cfg: TrainConfig, stage: int, epoch: int = 0, total_epochs: int = 1):
    """Forward one episode; returns ``(total, parts, per-sample L2)``."""
    pred, aux = model(ep.prompt_a, ep.prompt_u, ep.a, ep.op_ids, exclude_tags=ep.tags, return_aux=True)
    per_sample = relative_l2(pred, ep.u, reduction="none")
    l_pred = per_sample.mean()
    parts = {"L_pred": l_pred}
    zero = l_pred * 0.0
    if stage == 2:
        w = LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4)
        lam, theta = curriculum_params(epoch, total_epochs)
        labels = torch.tensor(ep.op_ids)
        z_a = model.encode_raw(ep.a).mean(dim=(-2, -1))
        z_u = model.encode_raw(ep.u).mean(dim=(-2, -1))
        e = torch.stack([model.sample_text_embedding(k, i) for k, i in zip(ep.op_ids, ep.index)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            c1 = supcon_loss(z_a, z_u, labels, cfg.tau_c, lam, theta) if w.lambda1 else zero
            c2 = supcon_loss(z_u, e, labels, cfg.tau_c, lam, theta) if w.lambda2 else zero
            c3 = supcon_loss(z_a, aux["z_u"], labels, cfg.tau_c, lam, theta) if w.lambda3 else zero
        consis = w.lambda1 * c1 + w.lambda2 * c2 + w.lambda3 * c3
        keys = model.memory_keys(ep.a, ep.u)[0]
        if len(model.memory) and not cfg.no_memory:
            keys = torch.cat([keys, model.memory.keys().to(keys.dtype)])
        div = diversity_loss(keys, w.lambda4) if w.lambda4 else zero
        parts.update(L_c_au=c1, L_c_ue=c2, L_c_amem=c3, L_consis=consis, L_div=div)
        total = l_pred + consis + div
    else:
        total = l_pred
    parts["total"] = total
    return total, parts, per_sample.detach()


@torch.no_grad()
def insert_episode(model: MOFSModel, ep: Episode, per_sample_l2: torch.Tensor) -> None:
    keys, values = model.memory_keys(ep.a, ep.u)
    q = [quality_from_loss(float(l)) for l in per_sample_l2]
    model.memory.insert_batch(keys, values, q, ep.op_ids, ep.tags)


# --------------------------------------------------------------------------
# stage loops
# --------------------------------------------------------------------------

@dataclass
class StageResult:
    model: MOFSModel
    trace: list[dict] = field(default_factory=list)


def train_stage(model: MOFSModel, operators: Sequence[OperatorTensors], cfg: TrainConfig, stage: int,
                epochs: int | None = None) -> StageResult:
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    epochs = (cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs) if epochs is None else epochs
    operators = sorted(operators, key=lambda o: o.operator_id)
    by_id = {op.operator_id: op for op in operators}
    set_stage(model, stage)
    model.train()
    n_items = sum(op.n for op in operators)
    steps_per_epoch = -(-n_items // cfg.batch_size)
    opt = Optimizer(model.parameters(), lr=cfg.lr, total_steps=epochs * steps_per_epoch, clip=cfg.clip)
    g = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
    trace, step = [], 0
    for epoch in range(epochs):
        order = epoch_order(operators, g)
        for start in range(0, len(order), cfg.batch_size):
            ep = make_episode(operators, order[start:start + cfg.batch_size], cfg.J, g)
            total, parts, per_sample = episode_losses(model, ep, by_id, cfg, stage, epoch, epochs)
            if not torch.isfinite(total):
                detail = {k: float(v) for k, v in parts.items()}
                raise NumericalError(f"non-finite stage-{stage} loss at epoch {epoch}, step {step}, "
                                     f"samples {ep.tags}: {detail}")
            opt.step(total)
            if not cfg.no_memory:
                insert_episode(model, ep, per_sample)
            row = {"stage": stage, "epoch": epoch, "step": step}
            row.update({k: float(torch.as_tensor(parts.get(k, 0.0)).detach()) for k in TRACE_FIELDS[3:]})
            trace.append(row)
            step += 1
        log.debug("stage %d epoch %d: %s", stage, epoch, trace[-1])
    model.eval()
    return StageResult(model, trace)


def train_stage1(model, operators, cfg, epochs=None) -> StageResult:
    return train_stage(model, operators, cfg, 1, epochs)


def train_stage2(model, operators, cfg, epochs=None) -> StageResult:
    return train_stage(model, operators, cfg, 2, epochs)


def write_trace(trace: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


@dataclass
class TrainedPipeline:
    model: MOFSModel
    operators: list[OperatorTensors]
    pretrain_heads: PretrainHeads | None
    pretrain_trace: list[dict]
    trace: list[dict]
    stage1_state: dict | None = None


def train_pipeline(datasets: Sequence[OperatorDataset], cfg: TrainConfig,
                   text_encoder: TextEncoder | None = None, keep_stage1: bool = False,
                   pretrained: dict | None = None) -> TrainedPipeline:
    """Pretrain (unless disabled), then both few-shot stages, on the given operators.

    ``pretrained`` is an encoder ``state_dict`` to reuse instead of pretraining again.
    """
    text_encoder = text_encoder or default_text_encoder(cfg)
    operators = [prepare_operator(ds, text_encoder) for ds in datasets]
    heads, ptrace, enc_state = None, [], pretrained
    if pretrained is None and not cfg.no_pretrain and cfg.pretrain_epochs > 0:
        res = pretrain_encoder(datasets, cfg)
        heads, ptrace, enc_state = res.heads, res.trace, res.encoder.state_dict()
    model = build_model(cfg, operators, enc_state)
    s1 = train_stage1(model, operators, cfg)
    stage1_state = {k: v.clone() for k, v in model.state_dict().items()} if keep_stage1 else None
    s2 = train_stage2(model, operators, cfg)
    return TrainedPipeline(model, operators, heads, ptrace, s1.trace + s2.trace, stage1_state)
