import math

import pytest
import torch
import torch.nn.functional as F

from mofs.errors import VisionBackboneUnavailable
from mofs.fusion import (
    FiLM,
    CrossAttention,
    GatedFusion,
    GradientCrossAttention,
    SelfAttentionBlock,
    VisionEncoder,
    from_tokens,
    to_tokens,
)

from conftest import fd_check, to_double


def test_token_round_trip():
    x = torch.randn(2, 3, 4, 5)
    t = to_tokens(x)
    assert t.shape == (2, 20, 3)
    torch.testing.assert_close(from_tokens(t, 4, 5), x)


# ---- vision -----------------------------------------------------------------

def test_vision_shape_and_determinism():
    enc = VisionEncoder(4).eval()
    x = torch.randn(2, 8, 8)
    out = enc(x)
    assert out.shape == (2, 4, 8, 8)
    torch.testing.assert_close(out, enc(x), rtol=0, atol=0)


def test_vision_zero_field_is_bias_path():
    enc = VisionEncoder(4).eval()
    # replicate padding keeps a constant field constant, so each conv acts on a
    # per-channel constant c as (sum of kernel taps) @ c + bias
    c = torch.zeros(1)
    with torch.no_grad():
        for conv in enc.backbone.convs:
            c = F.gelu(conv.weight.sum(dim=(-2, -1)) @ c + conv.bias)
        expected = enc.proj.weight[:, :, 0, 0] @ c + enc.proj.bias
    out = enc(torch.zeros(1, 8, 8))
    torch.testing.assert_close(out, expected.view(1, 4, 1, 1).expand_as(out), atol=1e-6, rtol=1e-5)


def test_missing_resnet_weights():
    with pytest.raises(VisionBackboneUnavailable):
        VisionEncoder(4, backbone="resnet18", weights_path="/nonexistent.pth", strict=True)
    with pytest.warns(RuntimeWarning):
        enc = VisionEncoder(4, backbone="resnet18", weights_path="/nonexistent.pth")
    assert enc.backbone_name == "conv"


# ---- gated fusion -----------------------------------------------------------

def test_gate_saturation_and_zero_weights():
    fuse = GatedFusion(3)
    f, v = torch.randn(5, 3), torch.randn(5, 3)
    with torch.no_grad():
        fuse.W.weight.zero_()
    torch.testing.assert_close(fuse(f, v), (f + v) / 2)
    torch.testing.assert_close(fuse(f, f), f)
    with torch.no_grad():
        fuse.W.weight.copy_(torch.tensor([[1e4, 0, 0, 0, 0, 0]]))
    f = torch.rand(5, 3) + 1
    torch.testing.assert_close(fuse(f, v), f)
    assert fuse(f, None) is f


# ---- cross attention --------------------------------------------------------

def test_single_key_attention():
    att = CrossAttention(4, heads=2)
    q, kv = torch.randn(1, 3, 4), torch.randn(1, 1, 4)
    out, A = att(q, kv, return_weights=True)
    assert torch.all(A == 1)
    torch.testing.assert_close(out, att.W_o(att.W_v(kv)).expand_as(out))


def test_key_permutation_invariance():
    att = CrossAttention(8, heads=2)
    q, kv = torch.randn(2, 5, 8), torch.randn(2, 6, 8)
    perm = torch.randperm(6)
    torch.testing.assert_close(att(q, kv), att(q, kv[:, perm]), atol=1e-6, rtol=1e-5)


def test_two_by_two_hand_case():
    att = CrossAttention(2, heads=1)
    with torch.no_grad():
        att.W_q.weight.copy_(torch.eye(2))
        att.W_k.weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 1.0]]))
        att.W_v.weight.copy_(torch.tensor([[1.0, 1.0], [0.0, 1.0]]))
        att.W_o.weight.copy_(torch.eye(2))
    q = torch.tensor([[[1.0, 0.0]]])
    kv = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
    # scores: q.Wk k / sqrt(2) = (2, 0)/sqrt(2); values: (1, 0), (1, 1)
    w1 = 1 / (1 + math.exp(-2 / math.sqrt(2)))
    expected = torch.tensor([[[1.0, 1 - w1]]])
    torch.testing.assert_close(att(q, kv), expected, atol=1e-6, rtol=0)


def test_null_token_gives_query_key_gradients():
    att = CrossAttention(4, heads=2, null_kv=True)
    q, kv = torch.randn(1, 3, 4), torch.randn(1, 1, 4)
    att(q, kv).pow(2).sum().backward()
    assert att.W_q.weight.grad.abs().sum() > 0 and att.W_k.weight.grad.abs().sum() > 0


# ---- FiLM -------------------------------------------------------------------

def test_film_cases():
    film = FiLM(2)
    with torch.no_grad():
        film.gamma.weight.zero_()
        film.beta.weight.zero_()
    x, c = torch.randn(3, 2), torch.randn(2)
    torch.testing.assert_close(film(x, c), x)
    with torch.no_grad():
        film.gamma.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 2.0]]))
        film.gamma.bias.copy_(torch.tensor([0.5, 0.0]))
        film.beta.weight.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
        film.beta.bias.copy_(torch.tensor([0.0, -1.0]))
    c = torch.tensor([1.0, 3.0])
    x = torch.tensor([[2.0, -1.0]])
    # gamma = (1.5, 6), beta = (3, 0)
    torch.testing.assert_close(film(x, c), torch.tensor([[6.0, -6.0]]))
    torch.testing.assert_close(film(torch.zeros(4, 2), c), torch.tensor([[3.0, 0.0]]).expand(4, 2))


# ---- self-attention block ---------------------------------------------------

def test_self_attention_block_layer_norm_output():
    sab = SelfAttentionBlock(8, heads=2)
    x = torch.randn(2, 5, 8) * 3
    out = sab(x)
    assert out.shape == x.shape
    torch.testing.assert_close(out.mean(-1), torch.zeros(2, 5), atol=1e-5, rtol=0)
    torch.testing.assert_close(out.var(-1, unbiased=False), torch.ones(2, 5), atol=1e-4, rtol=0)


# ---- gradient cross-attention -----------------------------------------------

def test_gca_zero_step_is_normalized_query():
    gca = GradientCrossAttention(4, eta=0.0)
    q = torch.randn(1, 3, 4)
    out1 = gca(q, torch.randn(1, 5, 4))
    out2 = gca(q, torch.randn(1, 2, 4))
    torch.testing.assert_close(out1, gca.ln_out(gca.ln_q(q)))
    torch.testing.assert_close(out1, out2)


def test_gca_single_key():
    gca = GradientCrossAttention(4)
    kv = torch.randn(1, 1, 4)
    _, A = gca(torch.randn(1, 3, 4), kv, return_weights=True)
    assert torch.all(A == 1)


def test_gca_hand_case():
    class Identity(torch.nn.Module):
        def forward(self, x):
            return x

    gca = GradientCrossAttention(2, eta=1.0)
    gca.mlp = Identity()
    q = torch.tensor([[[3.0, 1.0]]])
    kv = torch.tensor([[[0.0, 2.0], [5.0, 1.0]]])
    # LN over two features maps any (x, y) with x != y to (+-1, -+1)
    Qn = torch.tensor([1.0, -1.0])
    Kn = torch.tensor([[-1.0, 1.0], [1.0, -1.0]])
    w = torch.softmax(Kn @ Qn / math.sqrt(2), 0)
    H = w @ Kn
    z = Qn - H
    expected = (z - z.mean()) / torch.sqrt(z.var(unbiased=False) + 1e-6)
    torch.testing.assert_close(gca(q, kv)[0, 0], expected, atol=1e-6, rtol=0)


# ---- gradients --------------------------------------------------------------

@pytest.mark.parametrize("block", ["gated", "cross", "film", "sab", "gca"])
def test_block_gradients(block):
    torch.manual_seed(0)
    d, n = 4, 3
    x = torch.randn(1, n, d, dtype=torch.double, requires_grad=True)
    c = torch.randn(1, 2, d, dtype=torch.double, requires_grad=True)
    if block == "gated":
        m = to_double(GatedFusion(d))
        fn = lambda: (m(x, c[:, :1].expand_as(x)) ** 2).sum()
    elif block == "cross":
        m = to_double(CrossAttention(d, heads=2, null_kv=True))
        fn = lambda: (m(x, c) ** 2).sum()
    elif block == "film":
        m = to_double(FiLM(d, init_std=0.5))
        fn = lambda: (m(x, c[:, 0]) ** 2).sum()
    elif block == "sab":
        m = to_double(SelfAttentionBlock(d, heads=2))
        fn = lambda: (m(x) * torch.arange(d, dtype=torch.double)).sum() ** 2
    else:
        m = to_double(GradientCrossAttention(d, eta=0.5))
        fn = lambda: (m(x, c) * torch.arange(d, dtype=torch.double)).sum() ** 2
    tensors = [x, c] + [p for p in m.parameters()]
    assert fd_check(fn, tensors, n_probe=4) < 1e-3
