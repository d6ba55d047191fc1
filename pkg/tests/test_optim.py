import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import reference_lamb
from fcx.optim import (FINETUNE_LR, DEFAULT_BATCH_SCHEDULE, PRETRAIN_LR, Lamb, LambState, LrSchedule,
                       NonFiniteGradient, batch_size_at, cosine_lr, lamb_step)


def test_scalar_worked_example():
    state = LambState()
    out = lamb_step({"w": torch.tensor([1.0], dtype=torch.float64)},
                    {"w": torch.tensor([0.5], dtype=torch.float64)}, state, lr=0.1)
    # m_hat = 0.5, v_hat = 0.25, r ~ 1, trust = |w| / |r|: the step is lr * |w|
    assert out["w"].item() == pytest.approx(0.9, abs=1e-12)
    assert state.t == 1


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_matches_per_element_reference_over_three_steps(wd):
    gen = torch.Generator().manual_seed(0)
    params = {"a": torch.randn(3, 4, generator=gen, dtype=torch.float64),
              "b": torch.randn(5, generator=gen, dtype=torch.float64)}
    grads = [{k: torch.randn(v.shape, generator=gen, dtype=torch.float64) for k, v in params.items()}
             for _ in range(3)]
    state = LambState(weight_decay=wd)
    cur = params
    for g in grads:
        cur = lamb_step(cur, g, state, lr=0.01)
    for name in params:
        ref = reference_lamb(params[name].flatten().tolist(), [g[name].flatten().tolist() for g in grads],
                              0.01, wd=wd)
        assert max(abs(a - b) for a, b in zip(cur[name].flatten().tolist(), ref)) < 1e-10


@given(st.floats(0.1, 10.0), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_update_scales_with_weight_norm(c, seed):
    gen = torch.Generator().manual_seed(seed)
    w = torch.randn(6, generator=gen, dtype=torch.float64)
    g = torch.randn(6, generator=gen, dtype=torch.float64)
    d1 = lamb_step({"w": w}, {"w": g}, LambState(), 0.01)["w"] - w
    d2 = lamb_step({"w": c * w}, {"w": g}, LambState(), 0.01)["w"] - c * w
    assert torch.allclose(d2, c * d1, rtol=1e-9, atol=1e-14)


def test_zero_weights_use_unit_trust():
    out = lamb_step({"w": torch.zeros(2, dtype=torch.float64)},
                    {"w": torch.tensor([1.0, -1.0], dtype=torch.float64)}, LambState(), lr=0.5)
    assert torch.allclose(out["w"], torch.tensor([-0.5, 0.5], dtype=torch.float64), atol=1e-6)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NonFiniteGradient, match="'bad'"):
        lamb_step({"ok": torch.ones(1), "bad": torch.ones(1)},
                  {"ok": torch.ones(1), "bad": torch.tensor([float("nan")])}, LambState(), 0.1)
    with pytest.raises(ValueError):
        lamb_step({"w": torch.ones(2)}, {"w": torch.ones(3)}, LambState(), 0.1)
    with pytest.raises(ValueError):
        lamb_step({"w": torch.ones(1)}, {"w": torch.ones(1)}, LambState(), 0.0)


def test_optimizer_class_matches_functional_step():
    gen = torch.Generator().manual_seed(1)
    w0 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    grads = [torch.randn(4, 3, generator=gen, dtype=torch.float64) for _ in range(3)]
    p = torch.nn.Parameter(w0.clone())
    opt = Lamb([p], lr=0.02)
    state = LambState()
    cur = {"p": w0}
    for g in grads:
        p.grad = g.clone()
        opt.step()
        cur = lamb_step(cur, {"p": g}, state, 0.02)
    assert torch.allclose(p.detach(), cur["p"], atol=1e-14)
    p.grad = torch.full_like(w0, float("inf"))
    opt.name_params([("layer.weight", p)])
    with pytest.raises(NonFiniteGradient, match="layer.weight"):
        opt.step()


def test_cosine_endpoints():
    s = LrSchedule(*PRETRAIN_LR, total_steps=1000)
    assert cosine_lr(0, s) == pytest.approx(3e-3, rel=1e-15)
    assert cosine_lr(1000, s) == pytest.approx(3e-4, rel=1e-12)
    assert cosine_lr(500, s) == pytest.approx(1.65e-3, rel=1e-12)
    assert cosine_lr(5000, s) == cosine_lr(1000, s)
    f = LrSchedule(*FINETUNE_LR, total_steps=10)
    assert cosine_lr(0, f) == pytest.approx(1e-4) and cosine_lr(10, f) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        cosine_lr(-1, s)
    with pytest.raises(ValueError):
        LrSchedule(1.0, 0.1, 0)


@given(st.integers(1, 10**5), st.data())
@settings(max_examples=50, deadline=None)
def test_cosine_is_monotone(T, data):
    s = LrSchedule(3e-3, 3e-4, T)
    a = data.draw(st.integers(0, T))
    b = data.draw(st.integers(a, T + 10))
    assert cosine_lr(b, s) <= cosine_lr(a, s)
    assert 3e-4 - 1e-18 <= cosine_lr(a, s) <= 3e-3


def test_batch_schedule():
    assert batch_size_at(0, DEFAULT_BATCH_SCHEDULE) == 4
    assert batch_size_at(11999, DEFAULT_BATCH_SCHEDULE) == 4
    assert batch_size_at(12000, DEFAULT_BATCH_SCHEDULE) == 8
    assert batch_size_at(10**6, DEFAULT_BATCH_SCHEDULE) == 8
    with pytest.raises(ValueError):
        batch_size_at(0, [])
    with pytest.raises(ValueError):
        batch_size_at(0, [(5, 4)])
