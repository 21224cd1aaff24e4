import numpy as np
import pytest
import torch

from mofs.text import (
    HashTextEncoder,
    TextProjection,
    compute_statistics,
    describe_samples,
    embed_operator,
    pooled_text_features,
    render_description,
    tokenize,
)


def test_constant_output_statistics():
    s = compute_statistics(np.ones((4, 4)), np.full((4, 4), 2.0))
    assert s.mu_u == 2.0 and s.sigma_u == 0.0 and s.mu_grad_u == 0.0


def test_unit_ramp_gradient():
    u = np.tile(np.arange(8.0), (8, 1))
    s = compute_statistics(np.ones((8, 8)), u)
    assert s.mu_grad_u == pytest.approx(1.0)
    assert s.sigma_grad_u == pytest.approx(0.0, abs=1e-12)


def test_binary_min_max():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    s = compute_statistics(a, a)
    assert (s.a_min, s.a_max) == (0.0, 1.0)


def test_rendered_sentence():
    s = compute_statistics(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))
    text = render_description("DarcyFlow-1.0", s)
    assert "PDE sample. The input coefficient field has mean" in text
    assert text == render_description("DarcyFlow-1.0", s)
    input_clause = text.split("The output")[0]
    assert input_clause.count("mean 1.000") == 1


def test_tokenizer_keeps_numbers():
    assert tokenize("mean -1.5e-3, std 2.") == ["mean", "-1.5e-3", ",", "std", "2", "."]


def test_hash_encoder_deterministic():
    enc = HashTextEncoder(d_bert=8)
    h1, m1 = enc.encode(["alpha beta"])
    h2, _ = HashTextEncoder(d_bert=8).encode(["alpha beta"])
    torch.testing.assert_close(h1, h2, rtol=0, atol=0)
    assert m1.sum() == 2


def test_identical_batch_equals_single():
    enc, proj = HashTextEncoder(d_bert=8), TextProjection(8, 4)
    one = embed_operator(["same text"], enc, proj)
    many = embed_operator(["same text"] * 5, enc, proj)
    torch.testing.assert_close(one, many)
    assert one.shape == (4,)


def test_two_token_fallback_embedding():
    enc, proj = HashTextEncoder(d_bert=6), TextProjection(6, 3)
    manual = (enc.token_vector("hello") + enc.token_vector("world")) / 2
    expected = torch.from_numpy(manual).float() @ proj.weight
    torch.testing.assert_close(embed_operator(["hello world"], enc, proj), expected)


def test_pooling_ignores_padding():
    enc = HashTextEncoder(d_bert=4, max_length=16)
    z = pooled_text_features(["a b", "a b c d e"], enc)
    np.testing.assert_allclose(z[0].numpy(), (enc.token_vector("a") + enc.token_vector("b")) / 2)


def test_truncation_warns():
    enc = HashTextEncoder(d_bert=4, max_length=3)
    with pytest.warns(RuntimeWarning):
        enc.encode(["a b c d e"])


def test_describe_samples_one_per_sample(darcy_small):
    texts = describe_samples(darcy_small.name, darcy_small.a, darcy_small.u)
    assert len(texts) == darcy_small.n_samples
    assert all(t.startswith(f"This is a {darcy_small.name} PDE sample.") for t in texts)
