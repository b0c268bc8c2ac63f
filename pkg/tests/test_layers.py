import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check
from tdcnet.layers import (
    ChannelDistributed,
    SpatialDropout1d,
    avg_pool_align,
    channel_distributed,
    conv_output_length,
    gated_activation,
    leaky_relu,
    receptive_field,
    spatial_dropout,
    time_distributed,
    unpadded_dilated_conv,
)

def naive_conv(x, w, b, d):
    """Nested-loop oracle: x (L, Cin), w (Cout, Cin, K)."""
    L, cin = x.shape
    cout, _, K = w.shape
    out = np.zeros((L - (K - 1) * d, cout))
    for t in range(out.shape[0]):
        for o in range(cout):
            acc = b[o]
            for k in range(K):
                for c in range(cin):
                    acc += w[o, c, k] * x[t + k * d, c]
            out[t, o] = acc
    return out

def receptive_field_by_enumeration(K, n_layers):
    """Track which input positions reach output position 0."""
    reach = {0}
    for layer in range(n_layers, 0, -1):
        d = 2 ** (layer - 1)
        reach = {p + k * d for p in reach for k in range(K)}
    return max(reach) - min(reach) + 1

@pytest.mark.parametrize("K,l,expected", [(2, 1, 2), (2, 4, 16), (4, 5, 94)])
def test_receptive_field_examples(K, l, expected):
    assert receptive_field(K, l) == expected

@pytest.mark.parametrize("K", [1, 2, 3, 4])
@pytest.mark.parametrize("l", [1, 2, 3, 4, 5])
def test_receptive_field_matches_enumeration(K, l):
    assert receptive_field(K, l) == receptive_field_by_enumeration(K, l)

def test_receptive_field_kernel_two_doubles():
    assert [receptive_field(2, l) for l in range(1, 5)] == [2, 4, 8, 16]

def test_length_telescoping():
    lengths, L = [], 104
    for l in range(1, 6):
        L = conv_output_length(L, 4, 2 ** (l - 1))
        lengths.append(L)
    assert lengths == [101, 95, 83, 59, 11]
    assert lengths[-1] == 104 - (receptive_field(4, 5) - 1)

def test_identity_kernel():
    x = torch.randn(2, 7, 3)
    w = torch.eye(3)[:, :, None]
    assert torch.equal(unpadded_dilated_conv(x, w, torch.zeros(3), 1), x)

def test_conv_output_length_104():
    x = torch.randn(1, 104, 2)
    y = unpadded_dilated_conv(x, torch.randn(5, 2, 4), torch.zeros(5), 16)
    assert y.shape == (1, 56, 5)

def test_conv_too_short_names_minimum():
    with pytest.raises(ValueError, match="at least 49"):
        unpadded_dilated_conv(torch.randn(1, 48, 1), torch.randn(1, 1, 4), None, 16)

def test_conv_six_steps_against_loops():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(6, 2)), rng.normal(size=(3, 2, 2)), rng.normal(size=3)
    got = unpadded_dilated_conv(torch.tensor(x)[None], torch.tensor(w), torch.tensor(b), 2)[0].numpy()
    np.testing.assert_allclose(got, naive_conv(x, w, b, 2), rtol=0, atol=1e-12)

@settings(max_examples=40, deadline=None)
@given(
    L=st.integers(2, 12),
    K=st.integers(1, 4),
    d=st.integers(1, 4),
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_conv_matches_naive_oracle(L, K, d, cin, cout, seed):
    if L <= (K - 1) * d:
        return
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(L, cin)), rng.normal(size=(cout, cin, K)), rng.normal(size=cout)
    got = unpadded_dilated_conv(torch.tensor(x)[None], torch.tensor(w), torch.tensor(b), d)[0].numpy()
    np.testing.assert_allclose(got, naive_conv(x, w, b, d), rtol=0, atol=1e-12)

def test_conv_first_and_last_output_receptive_span():
    L, K, d = 10, 3, 2
    r = 1 + (K - 1) * d
    w = torch.ones(1, 1, K)
    for pos in range(L):
        x = torch.zeros(1, L, 1)
        x[0, pos, 0] = 1.0
        y = unpadded_dilated_conv(x, w, None, d)[0, :, 0]
        first_sees = y[0] != 0
        last_sees = y[-1] != 0
        assert bool(first_sees) == (pos < r and pos % d == 0)
        assert bool(last_sees) == (pos >= L - r and (pos - (L - r)) % d == 0)

def test_gated_activation_values():
    one = torch.tensor([1.0])
    assert gated_activation(one, one).item() == pytest.approx(math.tanh(1) / (1 + math.exp(-1)), abs=1e-15)
    assert gated_activation(one, one).item() == pytest.approx(0.5568, abs=5e-5)
    assert torch.all(gated_activation(torch.zeros(4), torch.randn(4)) == 0)
    assert abs(gated_activation(torch.tensor([3.0]), torch.tensor([-800.0])).item()) < 1e-300

def test_gated_activation_shape_mismatch():
    with pytest.raises(ValueError):
        gated_activation(torch.zeros(2, 3), torch.zeros(3, 2))

def test_channel_distributed_identity():
    x = torch.randn(2, 5, 3)
    assert torch.equal(channel_distributed(x, torch.eye(5), torch.zeros(5)), x)

def test_channel_distributed_mean_cell():
    x = torch.tensor([[[1.0, 10.0], [2.0, 20.0], [6.0, 30.0]]])
    y = channel_distributed(x, torch.full((1, 3), 1 / 3), torch.zeros(1))
    np.testing.assert_allclose(y.numpy(), [[[3.0, 20.0]]], atol=1e-12)

def test_channel_distributed_permutation_equivariance():
    cell = ChannelDistributed(6, 2)
    with torch.no_grad():
        cell.weight.normal_()
        cell.bias.normal_()
    x = torch.randn(3, 6, 5)
    perm = torch.randperm(5)
    torch.testing.assert_close(cell(x[:, :, perm]), cell(x)[:, :, perm], rtol=0, atol=1e-13)

def test_channel_distributed_parameter_count_and_arity():
    cell = ChannelDistributed(101, 1)
    assert sum(p.numel() for p in cell.parameters()) == 101 * 1 + 1
    with pytest.raises(ValueError):
        cell(torch.randn(1, 100, 8))

def test_time_distributed_constant_and_reversal():
    lin = torch.nn.Linear(4, 2)
    const = torch.randn(1, 1, 4).expand(2, 6, 4)
    out = time_distributed(const, lin)
    assert out.shape == (2, 6, 2)
    assert torch.allclose(out, out[:, :1].expand_as(out))
    x = torch.randn(2, 6, 4)
    torch.testing.assert_close(time_distributed(x.flip(1), lin), time_distributed(x, lin).flip(1))

def test_time_distributed_frames():
    conv = torch.nn.Conv2d(3, 5, 2)
    frames = torch.randn(2, 4, 3, 6, 6)
    out = time_distributed(frames, conv)
    assert out.shape == (2, 4, 5, 5, 5)
    torch.testing.assert_close(out[1, 2], conv(frames[1, 2][None])[0])

def test_avg_pool_align():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
    np.testing.assert_allclose(avg_pool_align(x, 1, 2)[0, :, 0].numpy(), [1.5, 2.5, 3.5])
    c = torch.full((1, 20, 3), 2.5)
    assert torch.allclose(avg_pool_align(c, 4, 4), torch.full((1, 8, 3), 2.5))

@pytest.mark.parametrize("L,K,d", [(104, 4, 1), (101, 4, 2), (95, 4, 4), (83, 4, 8), (59, 4, 16), (10, 2, 3)])
def test_avg_pool_length_matches_conv(L, K, d):
    x = torch.randn(1, L, 2)
    conv = unpadded_dilated_conv(x, torch.randn(2, 2, K), None, d)
    assert avg_pool_align(x, d, K).shape == conv.shape

def test_dropout_identity_modes():
    x = torch.randn(4, 5, 6)
    assert torch.equal(spatial_dropout(x, 0.15, training=False), x)
    assert torch.equal(spatial_dropout(x, 0.0, training=True), x)
    layer = SpatialDropout1d(0.15).eval()
    assert torch.equal(layer(x), x)

def test_dropout_zeroes_whole_channels_and_rescales():
    gen = torch.Generator().manual_seed(3)
    x = torch.ones(2, 7, 1000)
    y = spatial_dropout(x, 0.15, gen, training=True)
    per_channel = y.amax(dim=1)
    assert torch.all((y == 0) | torch.isclose(y, torch.tensor(1 / 0.85)))
    assert torch.equal(y.amin(dim=1) == 0, per_channel == 0)

def test_dropout_fraction():
    gen = torch.Generator().manual_seed(0)
    y = spatial_dropout(torch.ones(1, 1, 10_000), 0.15, gen, training=True)
    frac = float((y == 0).double().mean())
    assert abs(frac - 0.15) <= 0.01

def test_dropout_probability_range():
    with pytest.raises(ValueError):
        spatial_dropout(torch.ones(1, 1, 1), 1.0)

def test_leaky_relu():
    assert leaky_relu(torch.tensor(2.0)).item() == 2.0
    assert leaky_relu(torch.tensor(-1.0), 0.3).item() == pytest.approx(-0.3)
    with pytest.raises(ValueError):
        leaky_relu(torch.tensor(1.0), 1.5)

@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20), st.floats(0.01, 0.99))
def test_leaky_relu_monotone(xs, slope):
    xs = torch.tensor(sorted(xs))
    ys = leaky_relu(xs, slope)
    assert torch.all(ys[1:] >= ys[:-1])

# -- gradients: reverse mode vs central differences ---------------------------

LAYER_TOL = 1e-4

def _proj(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))

def test_grad_unpadded_conv():
    x, w, b = torch.randn(2, 9, 3), torch.randn(4, 3, 3), torch.randn(4)
    r = _proj((2, 9 - 2 * 2, 4), 1)
    assert check(lambda: (unpadded_dilated_conv(x, w, b, 2) * r).sum(), [x, w, b]) < LAYER_TOL

def test_grad_channel_distributed():
    x, w, b = torch.randn(2, 7, 3), torch.randn(2, 7), torch.randn(2)
    r = _proj((2, 2, 3), 2)
    assert check(lambda: (channel_distributed(x, w, b) * r).sum(), [x, w, b]) < LAYER_TOL

def test_grad_gated_activation():
    a, g = torch.randn(2, 5, 3), torch.randn(2, 5, 3)
    r = _proj((2, 5, 3), 3)
    assert check(lambda: (gated_activation(a, g) * r).sum(), [a, g]) < LAYER_TOL

def test_grad_avg_pool_align():
    x = torch.randn(2, 11, 3)
    r = _proj((2, 11 - 6, 3), 4)
    assert check(lambda: (avg_pool_align(x, 2, 4) * r).sum(), [x]) < LAYER_TOL
