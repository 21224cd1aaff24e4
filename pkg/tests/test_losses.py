import math

import pytest
import torch

from mofs.losses import (
    LossWeights,
    consistency_loss,
    curriculum_params,
    diversity_loss,
    relative_l2,
    supcon_loss,
)

import oracles


def test_relative_l2_cases():
    u = torch.randn(2, 4, 4)
    assert relative_l2(u, u) == 0
    assert float(relative_l2(torch.zeros_like(u), u)) == pytest.approx(1.0)
    v = torch.tensor([3.0, 4.0])
    assert float(relative_l2(torch.zeros(2), v)) == pytest.approx(1.0)
    assert float(relative_l2(torch.tensor([3.0, 0.0]), v)) == pytest.approx(0.8)


def test_relative_l2_per_sample_oracle():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(3, 4, 5, generator=g, dtype=torch.double), torch.randn(3, 4, 5, generator=g, dtype=torch.double)
    per = relative_l2(a, b, reduction="none")
    for i in range(3):
        assert float(per[i]) == pytest.approx(oracles.rel_l2(a[i].tolist(), b[i].tolist()), rel=1e-12)
    with pytest.raises(ValueError):
        relative_l2(a, b[:2])


def test_curriculum_schedule():
    assert curriculum_params(0, 10) == (0.0, 0.7)
    for t in (3, 4, 9, 100):
        lam, theta = curriculum_params(t, 10)
        assert lam == 1.0 and theta == pytest.approx(0.4)
    lam, theta = curriculum_params(1.5, 10)
    assert lam == pytest.approx(0.5) and theta == pytest.approx(0.55)
    thetas = [curriculum_params(t / 10, 10)[1] for t in range(101)]
    assert all(x >= y for x, y in zip(thetas, thetas[1:]))


def test_supcon_same_label_pair_is_zero():
    z = torch.randn(2, 4)
    assert float(supcon_loss(z, torch.randn(2, 4), [1, 1], tau=0.5)) == pytest.approx(0.0, abs=1e-7)


def test_supcon_no_positive_warns():
    with pytest.warns(RuntimeWarning):
        assert supcon_loss(torch.randn(2, 4), torch.randn(2, 4), [0, 1]) == 0


def test_supcon_three_sample_hand_case():
    z_a = torch.tensor([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]], dtype=torch.double)
    z_u = torch.tensor([[0.8, 0.6], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.double)
    # anchors 0 and 1 share label 0; anchor 2 has no positive and is dropped.
    # S (tau=1): row0 = (.8, 1, -1), row1 = (.96, .6, -.6)
    l0 = -math.log(math.exp(1.0) / (math.exp(1.0) + math.exp(-1.0)))
    l1 = -math.log(math.exp(0.96) / (math.exp(0.96) + math.exp(-0.6)))
    expected = (l0 + l1) / 2
    got = supcon_loss(z_a, z_u, [0, 0, 1], tau=1.0)
    assert float(got) == pytest.approx(expected, abs=1e-6)
    w = LossWeights(1.0, 0.0, 0.0, 0.0)
    cons = consistency_loss(z_a, z_u, z_u, z_u, [0, 0, 1], w, tau=1.0)
    assert float(cons) == pytest.approx(expected, abs=1e-6)


def test_supcon_hard_negatives_raise_loss():
    z_a = torch.tensor([[1.0, 0.0], [0.9, 0.1], [1.0, 0.05]])
    z_u = torch.tensor([[1.0, 0.0], [0.95, 0.0], [1.0, 0.02]])
    base = supcon_loss(z_a, z_u, [0, 0, 1], tau=1.0, lam=0.0, theta=0.4)
    hard = supcon_loss(z_a, z_u, [0, 0, 1], tau=1.0, lam=1.0, theta=0.4)
    assert hard > base


def test_supcon_matches_oracle_random():
    g = torch.Generator().manual_seed(2)
    for _ in range(30):
        B = int(torch.randint(2, 6, (1,), generator=g))
        d = int(torch.randint(1, 9, (1,), generator=g))
        z_a = torch.randn(B, d, generator=g, dtype=torch.double)
        z_u = torch.randn(B, d, generator=g, dtype=torch.double)
        labels = torch.randint(0, 2, (B,), generator=g)
        if not any((labels == l).sum() > 1 for l in labels.unique()):
            continue
        lam, theta = float(torch.rand(1, generator=g)), 0.4
        got = float(supcon_loss(z_a, z_u, labels, 0.5, lam, theta))
        ref = oracles.supcon(z_a.tolist(), z_u.tolist(), labels.tolist(), 0.5, lam, theta)
        assert got == pytest.approx(ref, abs=1e-9)


def test_consistency_zero_weights_and_identical_pairs():
    z = torch.randn(4, 3)
    labels = [0, 0, 1, 1]
    assert consistency_loss(z, z, z, z, labels, LossWeights(0, 0, 0, 0)) == 0
    single = supcon_loss(z, z, labels)
    total = consistency_loss(z, z, z, z, labels, LossWeights(1.0, 1.0, 1.0, 0.0))
    assert float(total) == pytest.approx(3 * float(single), rel=1e-6)


def test_diversity_cases():
    assert diversity_loss(torch.eye(3), 0.5) == 0
    k = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert float(diversity_loss(k, 0.01)) == pytest.approx(0.01)
    k = torch.tensor([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]], dtype=torch.double)
    assert float(diversity_loss(k, 0.1)) == pytest.approx(oracles.diversity(k.tolist(), 0.1), abs=1e-9)
    assert diversity_loss(torch.ones(1, 3)) == 0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)
