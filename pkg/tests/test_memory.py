import math

import pytest
import torch

from mofs.errors import EmptyMemoryError
from mofs.memory import MemoryBuffer, MemoryReadout, quality_from_loss

import oracles


def filled(n, d=3, seed=0, quality=None):
    g = torch.Generator().manual_seed(seed)
    buf = MemoryBuffer(capacity=64)
    for i in range(n):
        q = quality[i] if quality is not None else float(torch.rand(1, generator=g)) * 0.9 + 0.05
        buf.insert(torch.randn(d, generator=g), torch.randn(d, generator=g), q, i % 2, tag=(i % 2, i))
    return buf


def test_fifo_eviction():
    buf = MemoryBuffer(capacity=2)
    for i in range(3):
        buf.insert(torch.full((2,), float(i)), torch.zeros(2), 1.0, 0)
    assert len(buf) == 2
    assert [e.insert_seq for e in buf.entries] == [1, 2]
    assert buf.keys()[0, 0] == 1.0


def test_quality_scores():
    assert quality_from_loss(0.0) == 1.0
    assert quality_from_loss(0.5) == pytest.approx(0.6065, abs=1e-4)


def test_insert_validation_and_detach():
    buf = MemoryBuffer(4)
    k = torch.randn(3, requires_grad=True)
    buf.insert(k * 2, torch.zeros(3), 0.5, 0)
    assert not buf.entries[0].key.requires_grad
    with pytest.raises(ValueError):
        buf.insert(torch.tensor([float("nan"), 0, 0]), torch.zeros(3), 0.5, 0)
    with pytest.raises(ValueError):
        buf.insert(torch.zeros(3), torch.zeros(3), 0.0, 0)
    with pytest.raises(ValueError):
        buf.insert(torch.zeros(4), torch.zeros(4), 0.5, 0)


def test_empty_buffer():
    with pytest.raises(EmptyMemoryError):
        MemoryReadout(3).retrieve(torch.randn(3), MemoryBuffer(4))


def test_uniform_weights_when_everything_ties():
    buf = MemoryBuffer(8)
    for _ in range(4):
        buf.insert(torch.tensor([1.0, 0.0]), torch.randn(2), 0.5, 0)
    r = MemoryReadout(2, k=8)
    _, _, w, _ = r.retrieve(torch.tensor([1.0, 1.0]), buf)
    torch.testing.assert_close(w, torch.full((4,), 0.25))


def test_hand_set_three_entries():
    buf = MemoryBuffer(8)
    for key in ([1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]):
        buf.insert(torch.tensor(key), torch.tensor(key) * 2, 0.5, 0)
    r = MemoryReadout(2)
    with torch.no_grad():
        r.W_q.weight.copy_(torch.eye(2))
    _, _, w, idx = r.retrieve(torch.tensor([1.0, 0.0]), buf, k=2, tau=1.0, alpha_qual=0.0)
    assert idx.tolist() == [0, 1]
    torch.testing.assert_close(w, torch.tensor([0.7311, 0.2689]), atol=1e-4, rtol=0)


def test_retrieval_matches_brute_force():
    g = torch.Generator().manual_seed(5)
    for trial in range(100):
        n, d = int(torch.randint(1, 12, (1,), generator=g)), 4
        buf = filled(n, d, seed=trial)
        r = MemoryReadout(d).double()
        k = int(torch.randint(1, 6, (1,), generator=g))
        q = torch.randn(d, generator=g, dtype=torch.double)
        with torch.no_grad():
            z_a, z_u, w, idx = r.retrieve(q, buf, k=k, tau=0.3, alpha_qual=0.7)
        keys, values, quality = buf.stacked()
        order, w_ref, za_ref, zu_ref = oracles.retrieve(
            q.tolist(), r.W_q.weight.tolist(), keys.double().tolist(), values.double().tolist(),
            quality.double().tolist(), k, 0.3, 0.7)
        assert idx.tolist() == order
        assert max(abs(a - b) for a, b in zip(w.tolist(), w_ref)) < 1e-6
        assert abs(float(w.sum()) - 1.0) < 1e-6
        assert max(abs(a - b) for a, b in zip(z_u.tolist(), zu_ref)) < 1e-6


def test_quality_monotonicity():
    buf = MemoryBuffer(8)
    key = torch.tensor([1.0, 0.5])
    buf.insert(key, torch.zeros(2), 0.2, 0)
    buf.insert(key, torch.ones(2), 0.9, 1)
    _, _, w, idx = MemoryReadout(2, k=2).retrieve(torch.tensor([0.3, 0.3]), buf)
    by_entry = dict(zip(idx.tolist(), w.tolist()))
    assert by_entry[1] > by_entry[0]


def test_self_exclusion_by_tag_and_cosine():
    buf = filled(5)
    r = MemoryReadout(3, k=5)
    tag = buf.entries[2].tag
    _, _, w, idx = r.retrieve(torch.randn(2, 3), buf, exclude_tags=[tag, None])
    assert 2 not in idx[0][w[0] > 0].tolist()
    assert 2 in idx[1].tolist()
    key = buf.entries[3].key
    _, _, w, idx = r.retrieve(key[None], buf, exclude_keys=key[None])
    assert 3 not in idx[0][w[0] > 0].tolist()


def test_all_entries_excluded_gives_zero_readout():
    buf = MemoryBuffer(4)
    buf.insert(torch.ones(3), torch.ones(3), 0.5, 0, tag=(0, 0))
    z_a, z_u, w, _ = MemoryReadout(3).retrieve(torch.randn(1, 3), buf, exclude_tags=[(0, 0)])
    assert torch.all(z_a == 0) and torch.all(w == 0)


def test_merge_cases():
    r = MemoryReadout(2)
    f = torch.randn(5, 2)
    torch.testing.assert_close(r.merge(f, torch.zeros(2)), f)
    with torch.no_grad():
        r.W_m.weight.fill_(-1e4)
    torch.testing.assert_close(r.merge(torch.ones(5, 2), torch.ones(2)), torch.ones(5, 2))
    with torch.no_grad():
        r.W_m.weight.copy_(torch.tensor([[1.0, 0.0, 0.0, 1.0]]))
    f = torch.tensor([[0.5, 1.0]])
    z = torch.tensor([2.0, -1.0])
    g = 1 / (1 + math.exp(-(0.5 - 1.0)))
    torch.testing.assert_close(r.merge(f, z), torch.tensor([[0.5 + 2 * g, 1.0 - g]]))


def test_state_round_trip():
    buf = filled(6)
    back = MemoryBuffer.from_state(buf.state())
    torch.testing.assert_close(back.keys(), buf.keys())
    assert [e.insert_seq for e in back.entries] == [e.insert_seq for e in buf.entries]
    assert back._seq == buf._seq
