import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proteus.autodiff import NonFiniteError, Tensor, set_debug
from proteus.errors import ConfigError
from proteus.optim import OptState, Schedule, adamw_step, clip_global_norm, global_norm, lr_at


def test_lr_schedule_endpoints():
    s = Schedule(base_lr=1e-3, min_lr=1e-5, warmup_steps=10, total_steps=100)
    assert lr_at(0, s) == 0.0
    assert lr_at(10, s) == pytest.approx(1e-3, abs=1e-15)
    assert lr_at(100, s) == pytest.approx(1e-5, abs=1e-15)
    assert lr_at(5, s) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        lr_at(101, s)


def test_schedule_without_warmup_starts_at_base():
    s = Schedule(base_lr=1e-3, min_lr=0.0, warmup_steps=0, total_steps=10)
    assert lr_at(0, s) == 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.integers(21, 200))
def test_cosine_part_is_non_increasing(warm, total):
    s = Schedule(base_lr=1.0, min_lr=0.1, warmup_steps=warm, total_steps=total)
    lrs = [lr_at(t, s) for t in range(warm, total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(lrs, lrs[1:]))
    assert all(0.1 - 1e-12 <= v <= 1.0 + 1e-12 for v in lrs)


@pytest.mark.parametrize("kw,field", [(dict(total_steps=0), "total_steps"), (dict(warmup_steps=300), "warmup_steps"),
                                      (dict(min_lr=1.0), "min_lr"), (dict(grad_clip_norm=0.0), "grad_clip_norm")])
def test_schedule_validation(kw, field):
    with pytest.raises(ConfigError) as err:
        Schedule(**kw)
    assert err.value.field == field


def _one(value=1.0, name="w.weight"):
    return {name: Tensor(np.array([value]), requires_grad=True, name=name)}


def test_zero_grad_no_decay_is_fixed_point():
    p = _one(0.3)
    s = Schedule(weight_decay=0.0, warmup_steps=0, total_steps=10)
    adamw_step(p, {"w.weight": np.zeros(1)}, OptState(), s, 0)
    assert p["w.weight"].data[0] == 0.3


def test_zero_lr_leaves_params_bitwise():
    p = _one(0.3)
    s = Schedule(warmup_steps=5, total_steps=10)  # lr(0) == 0
    before = p["w.weight"].data.tobytes()
    adamw_step(p, {"w.weight": np.array([2.0])}, OptState(), s, 0)
    assert p["w.weight"].data.tobytes() == before


def test_first_step_matches_hand_computed_update():
    lr, wd, eps, g, w0 = 1e-2, 0.1, 1e-8, 0.5, 1.5
    s = Schedule(base_lr=lr, min_lr=lr, warmup_steps=0, total_steps=10, weight_decay=wd, epsilon=eps)
    p = _one(w0)
    adamw_step(p, {"w.weight": np.array([g])}, OptState(), s, 0)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g * g / (1 - 0.999)
    expected = w0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(p["w.weight"].data[0] - expected) < 1e-12
    # the step size is lr*(1 - eps-correction)*sign(g), plus decay
    assert abs((w0 * (1 - lr * wd) - p["w.weight"].data[0]) - lr * g / (abs(g) + eps)) < 1e-9


def test_no_decay_on_norms_and_biases():
    s = Schedule(base_lr=1e-2, min_lr=1e-2, warmup_steps=0, total_steps=10, weight_decay=0.5)
    params = {n: Tensor(np.array([1.0]), True, n) for n in ("norm.weight", "blocks.0.attn.proj.bias", "cls_token")}
    adamw_step(params, {n: np.zeros(1) for n in params}, OptState(), s, 0)
    for t in params.values():
        assert t.data[0] == 1.0


def test_clip_equivalence():
    c = 0.5
    g = np.array([3.0, 4.0]) * (2 * c / 5.0)  # norm 2c
    s_clip = Schedule(base_lr=1e-2, min_lr=1e-2, warmup_steps=0, total_steps=10, grad_clip_norm=c, weight_decay=0)
    s_none = Schedule(base_lr=1e-2, min_lr=1e-2, warmup_steps=0, total_steps=10, weight_decay=0)
    a = {"x.weight": Tensor(np.array([1.0, -1.0]), True, "x.weight")}
    b = {"x.weight": Tensor(np.array([1.0, -1.0]), True, "x.weight")}
    adamw_step(a, {"x.weight": g}, OptState(), s_clip, 0)
    adamw_step(b, {"x.weight": g / 2}, OptState(), s_none, 0)
    np.testing.assert_allclose(a["x.weight"].data, b["x.weight"].data, atol=1e-15)


def test_clip_examples():
    g = {"a": np.array([0.1, 0.2])}
    assert clip_global_norm(g, 5.0)["a"] is g["a"]
    g = {"a": np.array([6.0, 8.0])}
    np.testing.assert_allclose(clip_global_norm(g, 5.0)["a"], [3.0, 4.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 10))
def test_clip_norm_property(seed, max_norm):
    r = np.random.default_rng(seed)
    g = {"a": r.standard_normal(5) * 3, "b": r.standard_normal((2, 2))}
    n = global_norm(g)
    assert abs(global_norm(clip_global_norm(g, max_norm)) - min(n, max_norm)) < 1e-7


def test_state_tensor_round_trip():
    st_ = OptState()
    p = _one(1.0)
    s = Schedule(warmup_steps=0, total_steps=10)
    adamw_step(p, {"w.weight": np.array([0.2])}, st_, s, 0)
    back = OptState.from_tensors(st_.to_tensors())
    assert back.step == 1
    np.testing.assert_array_equal(back.m["w.weight"], st_.m["w.weight"])
    np.testing.assert_array_equal(back.v["w.weight"], st_.v["w.weight"])


def test_debug_rejects_nan_gradient():
    set_debug(True)
    with pytest.raises(NonFiniteError):
        adamw_step(_one(), {"w.weight": np.array([np.nan])}, OptState(), Schedule(warmup_steps=0), 0)
