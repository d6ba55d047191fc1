import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fcx.flowwarp import compose_prediction, temporal_warp
from fcx.synthdata import _bilinear_periodic

shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(2, 6), st.integers(2, 7))


def _x(shape, seed=0, dtype=torch.float64):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@given(shapes, st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_zero_flow_is_exact_identity(shape, seed):
    x = _x(shape, seed, torch.float32)
    B, C, H, W = shape
    assert torch.equal(temporal_warp(x, torch.zeros(B, 2, H, W)), x)
    assert torch.equal(temporal_warp(x, torch.zeros(B, 2 * C, H, W)), x)


@given(shapes, st.integers(-9, 9), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_integer_x_flow_is_circular_shift(shape, s, seed):
    x = _x(shape, seed, torch.float32)
    B, C, H, W = shape
    flow = torch.zeros(B, 2, H, W)
    flow[:, 0] = s
    out = temporal_warp(x, flow)
    assert (out - torch.roll(x, s, dims=-1)).abs().max() < 1e-6


def test_integer_y_flow_clamps_rows():
    x = _x((1, 1, 5, 4))
    flow = torch.zeros(1, 2, 5, 4)
    flow[:, 1] = 2.0
    out = temporal_warp(x, flow)
    src_rows = [0, 0, 0, 1, 2]  # row i reads row clamp(i - 2)
    assert torch.equal(out[0, 0], x[0, 0, src_rows])


def test_fractional_flow_hand_bilinear():
    x = torch.arange(12, dtype=torch.float64).reshape(1, 1, 3, 4) ** 2
    flow = torch.zeros(1, 2, 3, 4, dtype=torch.float64)
    flow[0, 0, 1, 2] = 0.25   # sample column 1.75
    flow[0, 1, 1, 2] = -0.5   # sample row 1.5
    out = temporal_warp(x, flow)
    g = x[0, 0]
    top = 0.25 * g[1, 1] + 0.75 * g[1, 2]
    bottom = 0.25 * g[2, 1] + 0.75 * g[2, 2]
    assert out[0, 0, 1, 2].item() == pytest.approx(0.5 * top.item() + 0.5 * bottom.item(), abs=1e-12)
    flow[0] = 0
    flow[0, 0, 0, 0] = 0.5  # column -0.5 wraps to between W-1 and 0
    out = temporal_warp(x, flow)
    assert out[0, 0, 0, 0].item() == pytest.approx(0.5 * (g[0, 3] + g[0, 0]).item(), abs=1e-12)


def test_matches_periodic_advection_oracle_for_zonal_flow():
    gen = np.random.default_rng(3)
    f = gen.normal(size=(2, 6, 10))
    u = gen.uniform(-2.5, 2.5, size=(6, 10))
    y, xg = np.meshgrid(np.arange(6.0), np.arange(10.0), indexing="ij")
    ref = _bilinear_periodic(f, y, xg - u)
    flow = torch.zeros(1, 2, 6, 10, dtype=torch.float64)
    flow[0, 0] = torch.from_numpy(u)
    out = temporal_warp(torch.from_numpy(f)[None], flow)[0].numpy()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_per_channel_flow_warps_each_channel():
    x = _x((1, 2, 4, 6))
    flow = torch.zeros(1, 4, 4, 6, dtype=torch.float64)
    flow[:, 0] = 1.0
    flow[:, 2] = -2.0
    out = temporal_warp(x, flow)
    assert torch.allclose(out[:, 0], torch.roll(x[:, 0], 1, dims=-1))
    assert torch.allclose(out[:, 1], torch.roll(x[:, 1], -2, dims=-1))


@given(shapes, st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_output_within_input_range(shape, seed):
    x = _x(shape, seed)
    B, C, H, W = shape
    flow = 3 * _x((B, 2, H, W), seed + 1)
    out = temporal_warp(x, flow)
    for b in range(B):
        for c in range(C):
            assert out[b, c].min() >= x[b, c].min() - 1e-12
            assert out[b, c].max() <= x[b, c].max() + 1e-12


def test_gradients_match_finite_differences():
    x = _x((1, 2, 4, 5)).requires_grad_(True)
    # keep displacements away from integers, where bilinear weights have kinks
    flow = (torch.floor(3 * _x((1, 2, 4, 5), 1)) + 0.3 + 0.4 * torch.rand(1, 2, 4, 5, dtype=torch.float64,
            generator=torch.Generator().manual_seed(2))).requires_grad_(True)
    assert torch.autograd.gradcheck(temporal_warp, (x, flow), eps=1e-6, atol=1e-8)


def test_shape_errors():
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ValueError):
        temporal_warp(x, torch.zeros(1, 4, 4, 4))
    with pytest.raises(ValueError):
        temporal_warp(x, torch.zeros(1, 2, 4, 5))
    with pytest.raises(ValueError):
        compose_prediction(torch.zeros(1, 3, 4, 5), x, torch.zeros(1, 2, 4, 4))


def test_compose_prediction():
    x = _x((1, 2, 4, 4))
    v = _x((1, 2, 4, 4), 1)
    assert torch.equal(compose_prediction(v, x, None), v)
    assert torch.equal(compose_prediction(v, x, torch.zeros(1, 2, 4, 4, dtype=torch.float64)), v + x)
