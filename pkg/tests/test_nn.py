import numpy as np
import pytest

from endocaver import nn
from endocaver.tensor import Tensor, count_macs


def test_conv_param_count_by_hand():
    # 3 -> 8, k=3, with bias: 3*8*9 + 8
    assert nn.Conv2d(3, 8, 3, padding=1).num_parameters() == 224


def test_conv_macs_closed_form():
    conv = nn.Conv2d(3, 8, 3, 1, 1)
    assert conv.macs(16, 16) == (55_296, 16, 16)
    with count_macs() as tally:
        conv(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
    assert tally.total == 55_296


def test_grouped_and_transposed_macs_match_trace():
    cases = [(nn.Conv2d(8, 8, 3, 2, 1, groups=8), (1, 8, 10, 10)),
             (nn.Conv2d(4, 6, 2, 2), (1, 4, 8, 8)),
             (nn.ConvTranspose2d(6, 3, 2, 2), (1, 6, 5, 7))]
    for layer, shape in cases:
        with count_macs() as tally:
            y = layer(Tensor(np.zeros(shape, dtype=np.float32)))
        m, ho, wo = layer.macs(*shape[-2:])
        assert m == tally.total and (ho, wo) == y.shape[-2:]


def test_attention_macs_match_trace():
    attn = nn.MultiHeadAttention(8, 2, context_dim=4)
    x, c = Tensor(np.zeros((1, 5, 8), np.float32)), Tensor(np.zeros((1, 3, 4), np.float32))
    with count_macs() as tally:
        attn(x, c)
    assert attn.macs(5, 3) == tally.total


def test_attention_indivisible_heads_rejected():
    with pytest.raises(ValueError, match="divisible"):
        nn.MultiHeadAttention(10, 3)


def test_attention_single_token_identity_projection_returns_value():
    attn = nn.MultiHeadAttention(4, 2)
    for layer in (attn.q, attn.k, attn.v, attn.proj):
        nn.identity_linear(layer)
    x = Tensor(np.array([[[0.1, -0.2, 0.3, 0.4]]], np.float32))
    np.testing.assert_allclose(attn(x).data, x.data, atol=1e-7)


class Pair(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 3, 3, padding=1, rng=np.random.default_rng(0))
        self.norms = [nn.BatchNorm2d(3), nn.BatchNorm2d(3)]


def test_module_traversal_names():
    m = Pair()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["conv.weight", "conv.bias", "norms.0.gamma", "norms.0.beta", "norms.1.gamma", "norms.1.beta"]
    assert [n for n, _ in m.named_buffers()] == ["norms.0.running_mean", "norms.0.running_var",
                                                  "norms.1.running_mean", "norms.1.running_var"]
    assert m.num_parameters() == 2 * 3 * 9 + 3 + 4 * 3


def test_state_dict_round_trip_and_strictness():
    a, b = Pair(), Pair()
    a.norms[0].running_mean[:] = 7.0
    a.conv.weight.data = a.conv.weight.data + 1.0
    b.load_state_dict(a.state_dict())
    for (_, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        np.testing.assert_array_equal(x, y)
    with pytest.raises(KeyError):
        b.load_state_dict({"conv.weight": a.conv.weight.data})
    bad = dict(a.state_dict())
    bad["conv.bias"] = np.zeros(5)
    with pytest.raises(ValueError):
        b.load_state_dict(bad)


def test_train_eval_flags_propagate():
    m = Pair().eval()
    assert not any(mod.training for _, mod in m.named_modules())
    m.train()
    assert all(mod.training for _, mod in m.named_modules())


def test_astype_casts_parameters_and_buffers():
    m = Pair().astype(np.float64)
    assert all(p.dtype == np.float64 for p in m.parameters())
    assert all(b.dtype == np.float64 for _, b in m.named_buffers())


def test_trunc_normal_bounds():
    x = nn.trunc_normal(np.random.default_rng(0), (1000,), std=0.02)
    assert np.abs(x).max() <= 0.04
