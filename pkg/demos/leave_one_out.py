"""A small leave-one-operator-out table with baselines and two ablations.

    python demos/leave_one_out.py
"""
import logging
import warnings

import torch

from mofs.config import TrainConfig
from mofs.data import generate_darcy
from mofs.evaluation import evaluate_leave_one_out

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")

with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    ops = [generate_darcy(beta, 10, 16, seed=0) for beta in (0.1, 1.0, 10.0)]

cfg = TrainConfig(d=32, stage1_epochs=60, stage2_epochs=20, lr=3e-3, baseline_epochs=200)
report = evaluate_leave_one_out(ops, cfg, runs=1, baselines=("fno", "mean"),
                                ablations=[("no_pretrain",), ("no_memory",)])
print(report.to_text())
