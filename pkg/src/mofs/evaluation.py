"""Leave-one-operator-out few-shot evaluation, baselines and ablations."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .baselines import BASELINE_KINDS, mean_prediction, train_baseline
from .config import ABLATION_FLAGS, TrainConfig
from .data import OperatorDataset
from .losses import relative_l2
from .model import MOFSModel
from .text import TextEncoder
from .training import default_text_encoder, prepare_operator, pretrain_encoder, train_pipeline

log = logging.getLogger(__name__)

BASELINE_COLUMNS = {"fno": "FNO", "deeponet": "DeepONet", "unet": "UNet", "mean": "Mean"}
ABLATION_COLUMNS = {"no_pretrain": "w/o pretrain", "no_text": "w/o text",
                    "no_memory": "w/o memory", "no_vision": "w/o vision"}
PROTOCOL_NOTE = ("baselines are trained on the training operators plus the J test demonstrations; "
                 "Mean predicts the pixelwise mean of normalized training outputs")


def demo_split(n: int, J: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded choice of ``J`` demonstration indices; the rest are queries."""
    if not 1 <= J < n:
        raise ValueError(f"need 1 <= J < n, got J={J}, n={n}")
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    return sorted(perm[:J]), sorted(perm[J:])


@dataclass
class FewShotSplit:
    test: OperatorDataset
    demos: OperatorDataset
    queries: OperatorDataset

    @classmethod
    def make(cls, test: OperatorDataset, J: int, seed: int) -> "FewShotSplit":
        d, q = demo_split(test.n_samples, J, seed)
        # normalizers of an unseen operator come from its demonstrations only
        demos = test.subset(d, refit=True)
        return cls(test, demos, test.subset(q))


def _physical_error(pred_norm: torch.Tensor, split: FewShotSplit) -> float:
    nu = split.demos.normalizers[1]
    pred = torch.as_tensor(nu.invert(pred_norm.double().numpy()))
    return float(relative_l2(pred, torch.tensor(split.queries.u, dtype=torch.float64)))


@torch.no_grad()
def few_shot_predict(model: MOFSModel, split: FewShotSplit, text_encoder: TextEncoder) -> torch.Tensor:
    """Normalized predictions for every query, conditioned on the split's demonstrations."""
    demos = prepare_operator(split.demos, text_encoder)
    queries = prepare_operator(split.queries, text_encoder, split.demos.normalizers)
    k = split.test.operator_id
    if str(k) in model.soft_prompts:
        raise ValueError(f"operator {k} was seen in training")
    model.register_unseen_operator(k, demos.text)
    model.eval()
    B = queries.n
    return model(demos.a.expand(B, *demos.a.shape), demos.u.expand(B, *demos.u.shape),
                 queries.a, [k] * B)


def mofs_error(model: MOFSModel, split: FewShotSplit, text_encoder: TextEncoder) -> float:
    return _physical_error(few_shot_predict(model, split, text_encoder), split)


def baseline_error(kind: str, train: Sequence[OperatorDataset], split: FewShotSplit, cfg: TrainConfig) -> float:
    norm = lambda ds, n: [torch.tensor(n[0].apply(ds.a.astype(np.float64)), dtype=torch.float32),
                          torch.tensor(n[1].apply(ds.u.astype(np.float64)), dtype=torch.float32)]
    pairs = [norm(ds, ds.normalizers) for ds in train]
    if kind == "mean":
        pred = mean_prediction([u for _, u in pairs]).expand(split.queries.n_samples, -1, -1)
        return _physical_error(pred, split)
    pairs.append(norm(split.demos, split.demos.normalizers))
    a = torch.cat([p[0] for p in pairs])
    u = torch.cat([p[1] for p in pairs])
    model = train_baseline(kind, a, u, epochs=cfg.baseline_epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                           seed=cfg.seed, d=cfg.d, n_blocks=cfg.n_blocks, modes=cfg.modes)
    qa = torch.tensor(split.demos.normalizers[0].apply(split.queries.a.astype(np.float64)), dtype=torch.float32)
    with torch.no_grad():
        return _physical_error(model(qa), split)


@dataclass
class EvalReport:
    """Per-operator relative L2 (mean, std over runs) for every column."""

    columns: list[str]
    rows: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    note: str = PROTOCOL_NOTE

    def add(self, operator: str, column: str, value: float) -> None:
        self.rows.setdefault(operator, {}).setdefault(column, []).append(float(value))

    def stats(self, operator: str, column: str) -> tuple[float, float]:
        vals = np.asarray(self.rows[operator][column])
        return float(vals.mean()), float(vals.std()) if len(vals) > 1 else 0.0

    def mean(self, operator: str, column: str) -> float:
        return self.stats(operator, column)[0]

    @property
    def runs(self) -> int:
        return max((len(v) for r in self.rows.values() for v in r.values()), default=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["operator"] + [f"{c}_{s}" for c in self.columns for s in ("mean", "std")])
        for op in self.rows:
            cells = []
            for c in self.columns:
                m, s = self.stats(op, c)
                cells += [f"{m:.6f}", f"{s:.6f}"]
            w.writerow([op] + cells)
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path

    def to_text(self) -> str:
        header = ["Operator"] + self.columns
        body = []
        for op in self.rows:
            cells = [op]
            for c in self.columns:
                m, s = self.stats(op, c)
                cells.append(f"{m:.4f} ± {s:.4f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(x.ljust(w) for x, w in zip(r, widths)).rstrip()
        lines = [f"# relative L2 over {self.runs} run(s); {self.note}", fmt(header),
                 "  ".join("-" * w for w in widths)]
        return "\n".join(lines + [fmt(r) for r in body]) + "\n"


def evaluate_leave_one_out(datasets: Sequence[OperatorDataset], cfg: TrainConfig, runs: int = 1,
                           leave_out: Iterable[str] | None = None,
                           baselines: Sequence[str] = ("mean",),
                           ablations: Sequence[Sequence[str]] = (),
                           text_encoder: TextEncoder | None = None,
                           include_full: bool = True) -> EvalReport:
    """Rotate each (or each named) operator into the test role and score every column.

    ``ablations`` is a list of flag sets; each becomes one column (single
    flags are labelled like the ablation table, combinations are joined).
    """
    if len(datasets) < 2:
        raise ValueError("leave-one-out needs at least two operators")
    names = [ds.name for ds in datasets]
    targets = list(leave_out) if leave_out is not None else names
    missing = set(targets) - set(names)
    if missing:
        raise ValueError(f"unknown operators {sorted(missing)}")
    for kind in baselines:
        if kind not in BASELINE_COLUMNS:
            raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINE_KINDS + ('mean',)}")
    abl = [tuple(sorted(set(f))) for f in ablations]
    for flags in abl:
        bad = set(flags) - set(ABLATION_FLAGS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
    abl_names = [" + ".join(ABLATION_COLUMNS[f] for f in flags) or "Full" for flags in abl]
    columns = (["MOFS"] if include_full else []) + [BASELINE_COLUMNS[b] for b in baselines] + abl_names
    report = EvalReport(columns)
    text_encoder = text_encoder or default_text_encoder(cfg)

    for name in targets:
        test = datasets[names.index(name)]
        train = [ds for ds in datasets if ds.name != name]
        for r in range(runs):
            run_cfg = cfg.override(seed=cfg.seed + r)
            split = FewShotSplit.make(test, run_cfg.J, run_cfg.seed)
            enc_state = None
            if run_cfg.pretrain_epochs > 0 and (not run_cfg.no_pretrain or any("no_pretrain" not in f for f in abl)):
                enc_state = pretrain_encoder(train, run_cfg).encoder.state_dict()
            if include_full:
                pipe = train_pipeline(train, run_cfg, text_encoder, pretrained=enc_state)
                report.add(name, "MOFS", mofs_error(pipe.model, split, text_encoder))
            for kind in baselines:
                report.add(name, BASELINE_COLUMNS[kind], baseline_error(kind, train, split, run_cfg))
            for flags, col in zip(abl, abl_names):
                acfg = run_cfg.with_flags(flags)
                pipe = train_pipeline(train, acfg, text_encoder, pretrained=enc_state)
                report.add(name, col, mofs_error(pipe.model, split, text_encoder))
            log.info("%s run %d: %s", name, r, {c: report.rows[name][c][-1] for c in report.rows[name]})
    return report


def run_ablation(datasets, cfg: TrainConfig, flags: Sequence[Sequence[str]] | None = None, **kw) -> EvalReport:
    """Full model plus one column per ablation flag set (default: each single flag)."""
    flags = flags if flags is not None else [(f,) for f in ABLATION_COLUMNS]
    return evaluate_leave_one_out(datasets, cfg, ablations=flags, **kw)
