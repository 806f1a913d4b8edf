import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proteus.autodiff import ShapeError, Tensor, backward, ops
from proteus.distill import (HEAD_KINDS, LossWeights, Objective, compute_losses, distill_step, identity_head,
                             loss_feat, loss_patch, loss_supervised_kd, loss_token, loss_total, make_head,
                             make_heads, project, sample_mask)
from proteus.errors import ConfigError
from proteus.optim import OptState, Schedule
from proteus.vit import Model, ViTConfig, init_params


def ident(d_s, d_t=None, kind="ln_linear"):
    return identity_head(kind, d_s, d_t or d_s)


def normed(rng, shape):
    x = rng.standard_normal(shape)
    x = x - x.mean(-1, keepdims=True)
    return x / np.sqrt((x ** 2).mean(-1, keepdims=True))


# masking ----------------------------------------------------------------------

def test_forced_ratio_masks_exact_count():
    m = sample_mask(50, 4, (0.5, 0.5), np.random.default_rng(0))
    assert np.all(m.mask.sum(1) == 2)


def test_mask_mean_fraction():
    m = sample_mask(10_000, 196, (0.1, 0.5), np.random.default_rng(0))
    f = m.fractions
    assert f.min() >= 0.1 and f.max() <= 0.5
    assert abs(f.mean() - 0.3) < 0.02


def test_mask_seeded():
    a = sample_mask(8, 16, rng=np.random.default_rng(4)).mask
    b = sample_mask(8, 16, rng=np.random.default_rng(4)).mask
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 64), st.floats(0.01, 0.9), st.floats(0.0, 0.09), st.integers(0, 999))
def test_mask_counts_in_bounds(p, lo, width, seed):
    hi = min(lo + width, 0.99)
    m = sample_mask(16, p, (lo, hi), np.random.default_rng(seed)).mask
    counts = m.sum(1)
    assert counts.min() >= 1 and counts.max() <= p - 1
    if math.ceil(lo * p - 1e-9) <= math.floor(hi * p + 1e-9):
        assert counts.min() >= math.ceil(lo * p - 1e-9) and counts.max() <= math.floor(hi * p + 1e-9)


def test_mask_rejects_bad_range():
    with pytest.raises(ConfigError):
        sample_mask(1, 4, (0.5, 0.2))


# heads ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", HEAD_KINDS)
def test_head_output_width(kind, rng):
    h = make_head(kind, 8, 12, rng)
    assert project(h, Tensor(rng.standard_normal((2, 5, 8)))).shape == (2, 5, 12)


def test_identity_head_maps_normalized_input(rng):
    x = normed(rng, (3, 4))
    y = project(ident(4, 6), Tensor(x)).data
    np.testing.assert_allclose(y[:, :4], x, atol=1e-6)
    assert np.all(y[:, 4:] == 0)


def test_head_rejects_wrong_width(rng):
    with pytest.raises(ShapeError):
        project(make_head("ln_linear", 8, 4, rng), Tensor(np.zeros((2, 7))))


@pytest.mark.parametrize("kind", HEAD_KINDS)
def test_head_weight_gradient(kind, rng):
    h = make_head(kind, 5, 3, rng)
    w = h.params[h.prefix + "linear.weight"]
    w.data = rng.standard_normal(w.shape)
    x, y = Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((4, 3)))
    g = backward(ops.mse(project(h, x), y), {"w": w})["w"]
    eps, worst = 1e-5, 0.0
    flat = w.data.reshape(-1)
    for j in range(flat.size):
        o = flat[j]
        flat[j] = o + eps
        up = ops.mse(project(h, x), y).item()
        flat[j] = o - eps
        dn = ops.mse(project(h, x), y).item()
        flat[j] = o
        num = (up - dn) / (2 * eps)
        worst = max(worst, abs(g.reshape(-1)[j] - num) / max(abs(num), abs(g.reshape(-1)[j]), 1e-3))
    assert worst < 1e-4


# losses -----------------------------------------------------------------------

def test_token_loss_zero_and_offset(rng):
    s = normed(rng, (3, 4))
    h = ident(4)
    p = project(h, Tensor(s)).data
    assert loss_token(Tensor(s), Tensor(p), h).item() < 1e-18
    assert abs(loss_token(Tensor(s), Tensor(p + 0.3), h).item() - 0.09) < 1e-12


def test_token_loss_loop_oracle(rng):
    h = make_head("ln_linear", 4, 4, rng)
    s, t = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    p = project(h, Tensor(s)).data
    acc = 0.0
    for i in range(2):
        for j in range(4):
            acc += (p[i, j] - t[i, j]) ** 2
    assert abs(loss_token(Tensor(s), Tensor(t), h).item() - acc / 8) < 1e-7


def test_feat_loss_zero_scale_and_oracle(rng):
    h = make_head("gelu_linear", 4, 6, rng)
    s = rng.standard_normal((2, 5, 4))
    p = project(h, Tensor(s)).data
    assert loss_feat(Tensor(s), Tensor(p), h).item() == 0.0
    t = rng.standard_normal((2, 5, 6))
    base = loss_feat(Tensor(s), Tensor(t), h).item()
    assert abs(loss_feat(Tensor(s), Tensor(p + 2 * (t - p)), h).item() - 4 * base) < 1e-12
    acc = sum((p[b, n, c] - t[b, n, c]) ** 2 for b in range(2) for n in range(5) for c in range(6))
    assert abs(base - acc / 60) < 1e-7


def test_patch_loss_masked_positions_only(rng):
    h = ident(4)
    s = normed(rng, (2, 6, 4))
    p = project(h, Tensor(s)).data
    mask = np.zeros((2, 6), bool)
    mask[:, [1, 4]] = True
    t = p.copy()
    t[~mask] = rng.standard_normal(t[~mask].shape) * 5
    assert loss_patch(Tensor(s), Tensor(t), mask, h).item() < 1e-18


def test_patch_loss_mean_normalisation(rng):
    h = ident(3)
    s = normed(rng, (1, 5, 3))
    t = project(h, Tensor(s)).data + 0.5  # same error at every position
    one = np.zeros((1, 5), bool)
    one[0, 2] = True
    most = np.ones((1, 5), bool)
    most[0, 0] = False
    a = loss_patch(Tensor(s), Tensor(t), one, h).item()
    b = loss_patch(Tensor(s), Tensor(t), most, h).item()
    assert abs(a - 0.25) < 1e-9 and abs(b - 0.25) < 1e-9


def test_patch_loss_index_loop_oracle(rng):
    h = make_head("linear_gelu", 4, 5, rng)
    s, t = rng.standard_normal((3, 6, 4)), rng.standard_normal((3, 6, 5))
    mask = sample_mask(3, 6, (0.2, 0.6), rng).mask
    p = project(h, Tensor(s)).data
    total = 0.0
    for b in range(3):
        idx = np.flatnonzero(mask[b])
        acc = 0.0
        for n in idx:
            for c in range(5):
                acc += (p[b, n, c] - t[b, n, c]) ** 2
        total += acc / (len(idx) * 5)
    assert abs(loss_patch(Tensor(s), Tensor(t), mask, h).item() - total / 3) < 1e-7


def test_patch_loss_all_positions_flag(rng):
    h = make_head("ln_linear", 4, 4, rng)
    s, t = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    mask = np.array([[True, False, False], [False, True, True]])
    full = loss_patch(Tensor(s), Tensor(t), mask, h, masked_only=False).item()
    assert abs(full - ops.mse(project(h, Tensor(s)), Tensor(t)).item()) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_patch_loss_ignores_unmasked_student_positions(seed):
    r = np.random.default_rng(seed)
    h = make_head("ln_linear", 4, 4, r)
    s, t = r.standard_normal((2, 8, 4)), r.standard_normal((2, 8, 4))
    mask = sample_mask(2, 8, (0.1, 0.5), r).mask
    s2 = s.copy()
    s2[~mask] += r.standard_normal(s2[~mask].shape) * 10
    assert loss_patch(Tensor(s), Tensor(t), mask, h).item() == loss_patch(Tensor(s2), Tensor(t), mask, h).item()


def test_total_selector_and_sum():
    a, b, c = Tensor([0.5]), Tensor([0.25]), Tensor([0.25])
    total, br = loss_total(a, b, c, LossWeights(1, 0, 0))
    assert total.item() == 0.5 and br.total == 0.5
    total, br = loss_total(a, b, c, LossWeights())
    assert total.item() == 1.0
    assert br.as_dict()["patch"] == 0.25


def test_total_gradient_is_weighted_sum(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True, name="x")
    parts = lambda: (ops.mean(ops.mul(x, x)), ops.sum(ops.gelu(x)), ops.mean(ops.scale(x, 3.0)))  # noqa: E731
    w = LossWeights(0.7, 1.3, 2.0)
    g_total = backward(loss_total(*parts(), w)[0], {"x": x})["x"]
    g_parts = [backward(p, {"x": x})["x"] for p in parts()]
    np.testing.assert_allclose(g_total, 0.7 * g_parts[0] + 1.3 * g_parts[1] + 2.0 * g_parts[2], atol=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ConfigError) as err:
        LossWeights(token=-1.0)
    assert "token" in err.value.field


# logit distillation -----------------------------------------------------------

def test_kd_identical_distributions(rng):
    z = rng.standard_normal((3, 5))
    loss, ce, kl = loss_supervised_kd(Tensor(z), Tensor(z), [0, 1, 2], "soft", use_ce=False)
    assert abs(kl) < 1e-12


def test_kd_uniform_ce_is_log4():
    loss, ce, kl = loss_supervised_kd(Tensor(np.zeros((2, 4))), Tensor(np.eye(2, 4)), [3, 1], "soft", True, 0.5)
    assert abs(ce - math.log(4)) < 1e-9


def test_kd_combination(rng):
    s, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    y = [0, 2, 1, 1]
    loss, ce, kl = loss_supervised_kd(Tensor(s), Tensor(t), y, "soft", True, 0.5)
    ce_sep = ops.cross_entropy(Tensor(s), y).item()
    pt = np.exp(t - t.max(1, keepdims=True))
    pt /= pt.sum(1, keepdims=True)
    kl_sep = ops.kl_div(ops.log_softmax(Tensor(s)), Tensor(pt)).item()
    assert abs(loss.item() - (0.5 * ce_sep + 0.5 * kl_sep)) < 1e-9


def test_kd_hard_uses_teacher_argmax(rng):
    s, t = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    loss, _, d = loss_supervised_kd(Tensor(s), Tensor(t), None, "hard", use_ce=False)
    assert abs(d - ops.cross_entropy(Tensor(s), t.argmax(1)).item()) < 1e-12


def test_kd_class_mismatch():
    with pytest.raises(ShapeError):
        loss_supervised_kd(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), [0, 1])


# steps ------------------------------------------------------------------------

def test_self_agreement_zero_token_feat(rng):
    cfg = ViTConfig(ln_eps=1e-12)
    params = init_params(cfg, seed=0)
    teacher = Model(cfg, params).frozen()
    student = Model(cfg, init_params(cfg, seed=0))
    heads = {k: identity_head("ln_linear", 32, 32, prefix=f"heads.{k}.") for k in ("token", "feat", "patch")}
    obj = Objective(weights=LossWeights(1, 1, 0))
    _, br = compute_losses(teacher, student, heads, rng.standard_normal((2, 3, 16, 16)), obj, rng)
    assert br.token < 1e-9 and br.feat < 1e-9


def test_zero_lr_step_leaves_student_unchanged(rng):
    cfg = ViTConfig()
    teacher = Model(cfg, init_params(cfg, seed=1)).frozen()
    student = Model(cfg, init_params(cfg, seed=2))
    before = {k: t.data.tobytes() for k, t in student.params.items()}
    heads = make_heads(Objective(), 32, 32, 0)
    s = Schedule(warmup_steps=5, total_steps=10)
    distill_step(teacher, student, heads, rng.standard_normal((2, 3, 16, 16)), Objective(), rng, OptState(), s, 0)
    assert all(student.params[k].data.tobytes() == v for k, v in before.items())


def test_weight_zero_components_logged_as_zero(rng):
    cfg = ViTConfig()
    teacher = Model(cfg, init_params(cfg, seed=1)).frozen()
    student = Model(cfg, init_params(cfg, seed=2))
    obj = Objective(weights=LossWeights(0, 1, 0))
    _, br = compute_losses(teacher, student, make_heads(obj, 32, 32, 0), rng.standard_normal((2, 3, 16, 16)), obj, rng)
    assert br.token == 0.0 and br.patch == 0.0 and br.feat > 0 and br.total == br.feat


def test_objective_validation():
    with pytest.raises(ConfigError) as err:
        Objective(kind="nope")
    assert err.value.field == "objective.kind"
