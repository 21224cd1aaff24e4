import hashlib
from dataclasses import replace

import numpy as np
import pytest
import torch

from mofs import evaluation
from mofs.config import TrainConfig
from mofs.evaluation import (ABLATION_COLUMNS, EvalReport, FewShotSplit, demo_split,
                             evaluate_leave_one_out, few_shot_predict, run_ablation)
from mofs.training import default_text_encoder, train_pipeline

SMALL = dict(d=8, n_blocks=2, modes=4, heads=2, n_samples=6, J=3, batch_size=4,
             stage1_epochs=1, stage2_epochs=1, pretrain_epochs=1, baseline_epochs=2)


def state_hash(model):
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def test_demo_split():
    d, q = demo_split(10, 4, seed=3)
    assert len(d) == 4 and sorted(d + q) == list(range(10))
    assert demo_split(10, 4, seed=3) == (d, q)
    assert demo_split(10, 4, seed=4) != (d, q)
    with pytest.raises(ValueError):
        demo_split(4, 4, 0)


def test_split_normalizers_come_from_demos(darcy_small):
    split = FewShotSplit.make(darcy_small, 3, seed=0)
    na, nu = split.demos.normalizers
    assert nu.mean == pytest.approx(float(split.demos.u.astype(np.float64).mean()), rel=1e-6)
    assert split.queries.n_samples == 3


def test_report_formatting():
    rep = EvalReport(["MOFS", "Mean"])
    for v in (0.1, 0.3):
        rep.add("op", "MOFS", v)
        rep.add("op", "Mean", 0.5)
    assert rep.stats("op", "MOFS") == pytest.approx((0.2, 0.1))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "operator,MOFS_mean,MOFS_std,Mean_mean,Mean_std"
    assert lines[1] == "op,0.200000,0.100000,0.500000,0.000000"
    text = rep.to_text()
    assert "2 run(s)" in text and "0.2000 ± 0.1000" in text


def test_two_operators_single_run(toy_pair):
    rep = evaluate_leave_one_out(toy_pair, TrainConfig(**SMALL), runs=1, baselines=("mean",))
    assert list(rep.rows) == [ds.name for ds in toy_pair]
    assert rep.columns == ["MOFS", "Mean"]
    for op in rep.rows:
        for c in rep.columns:
            m, s = rep.stats(op, c)
            assert np.isfinite(m) and m > 0 and s == 0.0


def test_evaluation_is_reproducible(toy_pair):
    cfg = TrainConfig(**SMALL)
    csvs = [evaluate_leave_one_out(toy_pair, cfg, leave_out=[toy_pair[0].name]).to_csv() for _ in range(2)]
    assert csvs[0] == csvs[1]


def test_unknown_inputs_rejected(toy_pair):
    cfg = TrainConfig(**SMALL)
    with pytest.raises(ValueError):
        evaluate_leave_one_out(toy_pair[:1], cfg)
    with pytest.raises(ValueError):
        evaluate_leave_one_out(toy_pair, cfg, leave_out=["nope"])
    with pytest.raises(ValueError):
        evaluate_leave_one_out(toy_pair, cfg, baselines=("resnet",))
    with pytest.raises(ValueError):
        evaluate_leave_one_out(toy_pair, cfg, ablations=[("no_magic",)])


def test_query_outputs_never_reach_training(toy_pair, monkeypatch):
    """Poisoning the held-out query targets must not change any trained weight or prediction."""
    cfg = TrainConfig(**SMALL)
    test = toy_pair[1]
    _, queries = demo_split(test.n_samples, cfg.J, cfg.seed)
    u = test.u.copy()
    u[queries] = 1e3 * np.random.default_rng(0).standard_normal(u[queries].shape)
    poisoned = replace(test, u=u.astype(np.float32))

    hashes, preds = [], []

    def recording(*args, **kw):
        pipe = train_pipeline(*args, **kw)
        hashes.append(state_hash(pipe.model))
        return pipe

    original_predict = evaluation.few_shot_predict

    def recording_predict(model, split, enc):
        out = original_predict(model, split, enc)
        preds.append(out.clone())
        return out

    monkeypatch.setattr(evaluation, "train_pipeline", recording)
    monkeypatch.setattr(evaluation, "few_shot_predict", recording_predict)
    clean = evaluate_leave_one_out(toy_pair, cfg, leave_out=[test.name], baselines=("mean",))
    dirty = evaluate_leave_one_out([toy_pair[0], poisoned], cfg, leave_out=[test.name], baselines=("mean",))
    assert len(hashes) == 2 and hashes[0] == hashes[1]
    assert torch.equal(preds[0], preds[1])
    # the error itself does see the poisoned targets
    assert dirty.mean(test.name, "MOFS") != clean.mean(test.name, "MOFS")


def test_unseen_operator_is_rejected_if_trained(toy_pair):
    cfg = TrainConfig(**SMALL)
    enc = default_text_encoder(cfg)
    pipe = train_pipeline(toy_pair, cfg, enc)
    with pytest.raises(ValueError, match="seen in training"):
        few_shot_predict(pipe.model, FewShotSplit.make(toy_pair[0], cfg.J, 0), enc)


def test_ablation_columns(toy_pair):
    cfg = TrainConfig(**SMALL)
    rep = run_ablation(toy_pair, cfg, leave_out=[toy_pair[0].name], baselines=())
    assert rep.columns == ["MOFS"] + list(ABLATION_COLUMNS.values())
    combo = run_ablation(toy_pair, cfg, flags=[("no_text", "no_memory")], leave_out=[toy_pair[0].name],
                         baselines=(), include_full=False)
    assert combo.columns == ["w/o memory + w/o text"]
