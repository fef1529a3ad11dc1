import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segrecipes import losses, model as M
from segrecipes.errors import EmptySelectionError, InvalidLabelError, InvalidShapeError
from segrecipes.losses import (IGNORE, OhemConfig, ce_loss, distill_kl, la_ce_loss, ohem_ce_loss,
                               ohem_select)
from segrecipes.numerics import grad_check, softmax


def oracle_ohem(p, labels, thr, min_keep):
    """Plain-Python enumeration of the OHEM rule."""
    valid = [i for i in range(len(p)) if labels[i] != IGNORE]
    if thr >= 1.0:
        return set(valid)
    chosen = [i for i in valid if p[i] < thr]
    rest = sorted((i for i in valid if i not in chosen), key=lambda i: (p[i], i))
    need = min(min_keep, len(valid)) - len(chosen)
    return set(chosen) | set(rest[:max(need, 0)])


def test_ce_symmetric_example():
    out = ce_loss(np.array([[0.0, 0.0]]), np.array([0]))
    assert out.value == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_array_equal(out.grad_logits, [[-0.5, 0.5]])


def test_ce_all_ignore_is_error():
    with pytest.raises(EmptySelectionError):
        ce_loss(np.zeros((3, 4)), np.full(3, IGNORE))


def test_ce_bad_inputs():
    with pytest.raises(InvalidLabelError):
        ce_loss(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(InvalidShapeError):
        ce_loss(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_ce_ignored_pixels_get_no_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    y = np.array([0, IGNORE, 2, 3, IGNORE, 1])
    out = ce_loss(x, y)
    assert not out.grad_logits[[1, 4]].any()
    assert out.selected_count == 4
    manual = -np.mean([math.log(softmax(x[i])[y[i]]) for i in (0, 2, 3, 5)])
    assert out.value == pytest.approx(manual, abs=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_ce_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3)) * 2
    y = rng.integers(0, 3, size=5)
    out = ce_loss(x, y)
    assert grad_check(lambda v: ce_loss(v, y).value, x, out.grad_logits) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_ce_properties(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 4)) * 3
    y = rng.integers(0, 4, size=8)
    out = ce_loss(x, y)
    assert out.value >= 0
    np.testing.assert_allclose(out.grad_logits.sum(axis=1), 0, atol=1e-9)
    shifted = x + rng.normal(size=(8, 1)) * shift
    assert ce_loss(shifted, y).value == pytest.approx(out.value, abs=1e-9)


def _la_instance(seed, tau=0.03, scale=1.0):
    rng = np.random.default_rng(seed)
    p = M.ModelParams(rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 5)),
                      np.zeros(5), head_kind="cosine_la", tau=tau, cosine_scale=scale)
    feats = np.abs(rng.normal(size=(6, 4)))
    prior = rng.dirichlet(np.ones(5) * 0.5)
    y = rng.integers(0, 5, size=6)
    return p, feats, prior, y


def test_la_zero_tau_is_plain_cosine_ce():
    p, f, _, y = _la_instance(1, tau=0.0)
    out = la_ce_loss(p, f, np.full(5, 0.2), y)
    ref = ce_loss(M.cosine_logits(p, f), y)
    assert out.value == ref.value


def test_la_uniform_prior_only_shifts():
    p, f, _, y = _la_instance(2)
    out = la_ce_loss(p, f, np.full(5, 0.2), y)
    assert out.value == pytest.approx(ce_loss(M.cosine_logits(p, f), y).value, abs=1e-12)


def test_la_penalises_rare_classes_at_equal_logits():
    # equal cosine logits: every class scores the same before the prior bias
    p = M.ModelParams(np.eye(2), np.zeros(2), np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]),
                      np.zeros(3), head_kind="cosine_la", tau=0.03)
    f = np.array([[1.0, 0.0]])
    prior = np.array([0.90, 0.09, 0.01])
    rare = la_ce_loss(p, f, prior, np.array([2])).value
    head = la_ce_loss(p, f, prior, np.array([0])).value
    plain = la_ce_loss(p.replace(), f, prior, np.array([2]))
    no_tau = M.ModelParams(**p.arrays(), head_kind="cosine_la", tau=0.0)
    base = la_ce_loss(no_tau, f, prior, np.array([2])).value
    assert base == pytest.approx(math.log(3), abs=1e-12)
    mpmath.mp.dps = 30
    b = [mpmath.mpf("0.03") * mpmath.log(mpmath.mpf(q)) for q in ("0.90", "0.09", "0.01")]
    expected = -(b[2] - mpmath.log(sum(mpmath.e ** v for v in b)))
    assert rare == pytest.approx(float(expected), abs=1e-12)
    assert rare > base > head
    assert plain.value == rare


@pytest.mark.parametrize("seed", range(20))
def test_la_ce_gradients(seed):
    p, f, prior, y = _la_instance(seed, scale=1.0 + seed)
    out = la_ce_loss(p, f, prior, y)
    g = grad_check(lambda w: la_ce_loss(p.replace(W2=w), f, prior, y).value, p.W2, out.param_grads["W2"])
    assert g < 1e-4
    g = grad_check(lambda v: la_ce_loss(p, v, prior, y).value, f, out.grad_feats)
    assert g < 1e-4


def test_ohem_examples():
    p = np.array([0.9, 0.5, 0.8, 0.2])
    y = np.zeros(4, dtype=int)
    sel = ohem_select(p, y, OhemConfig(0.7, 1))
    assert set(np.nonzero(sel)[0]) == {1, 3}
    sel = ohem_select(p, y, OhemConfig(0.7, 3))
    assert set(np.nonzero(sel)[0]) == {1, 2, 3}
    assert ohem_select(p, y, OhemConfig(1.0, 0)).all()


def test_ohem_ties_by_index():
    p = np.array([0.9, 0.8, 0.8, 0.8, 0.95])
    sel = ohem_select(p, np.zeros(5, dtype=int), OhemConfig(0.5, 2))
    assert list(np.nonzero(sel)[0]) == [1, 2]


def test_ohem_excludes_ignore_and_caps_at_valid():
    p = np.array([0.1, 0.9, 0.2, 0.99])
    y = np.array([0, IGNORE, IGNORE, 1])
    sel = ohem_select(p, y, OhemConfig(0.5, 10))
    assert list(np.nonzero(sel)[0]) == [0, 3]


def test_ohem_default_min_keep_fraction():
    cfg = OhemConfig(0.7)
    assert cfg.resolve_min_keep(1000) == 50
    assert cfg.resolve_min_keep(1) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ohem_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    p = np.round(rng.uniform(0, 1, size=n), 1)  # coarse grid forces ties
    y = np.where(rng.uniform(size=n) < 0.2, IGNORE, 0)
    cfg = OhemConfig(float(rng.choice([0.3, 0.7, 1.0])), int(rng.integers(0, n + 3)))
    sel = ohem_select(p, y, cfg)
    assert set(np.nonzero(sel)[0]) == oracle_ohem(p, y, cfg.conf_threshold, cfg.min_keep)
    # idempotent: reselecting within the chosen pixels keeps them all
    again = ohem_select(np.where(sel, p, 1.0), np.where(sel, y, IGNORE), cfg)
    assert set(np.nonzero(again)[0]) <= set(np.nonzero(sel)[0])


def test_ohem_ce_full_threshold_equals_ce():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 4)) * 5
    x[0] = [200.0, 0, 0, 0]  # softmax rounds to exactly 1 for the gt class
    y = rng.integers(0, 4, size=30)
    y[0] = 0
    y[5] = IGNORE
    a = ohem_ce_loss(x, y, OhemConfig(1.0, 0))
    b = ce_loss(x, y)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad_logits, b.grad_logits)


def test_ohem_ce_empty_selection():
    x = np.array([[10.0, 0.0], [0.0, 10.0]])
    with pytest.raises(EmptySelectionError):
        ohem_ce_loss(x, np.array([0, 1]), OhemConfig(0.7, 0))


@pytest.mark.parametrize("seed", range(10))
def test_ohem_ce_matches_subset_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 5)) * 2
    y = rng.integers(0, 5, size=40)
    cfg = OhemConfig(0.4, 12)
    out = ohem_ce_loss(x, y, cfg)
    gt = np.array([softmax(x[i])[y[i]] for i in range(40)])
    keep = sorted(oracle_ohem(gt, y, 0.4, 12))
    ref = ce_loss(x[keep], y[keep])
    assert out.selected_count == len(keep)
    assert out.value == pytest.approx(ref.value, abs=1e-12)
    np.testing.assert_allclose(out.grad_logits[keep], ref.grad_logits, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ohem_selection_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 3))
    y = rng.integers(0, 3, size=20)
    cfg = OhemConfig(0.45, 5)
    a = ohem_select(losses.gt_probabilities(x, y), y, cfg)
    b = ohem_select(losses.gt_probabilities(x + rng.normal(size=(20, 1)) * 10, y), y, cfg)
    np.testing.assert_array_equal(a, b)


def test_kl_identity():
    x = np.random.default_rng(0).normal(size=(4, 3, 6))
    out = distill_kl(x, x)
    assert out.value == 0.0
    assert not out.grad_logits.any()


def test_kl_worked_example():
    mpmath.mp.dps = 30
    s = np.log([[0.25, 0.75]])
    t = np.log([[0.5, 0.5]])
    expected = mpmath.mpf("0.5") * mpmath.log(2) + mpmath.mpf("0.5") * mpmath.log(mpmath.mpf(2) / 3)
    assert distill_kl(s, t).value == pytest.approx(float(expected), abs=1e-15)
    assert float(expected) == pytest.approx(0.143841, abs=5e-7)


def test_kl_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        distill_kl(np.zeros((2, 3)), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("T", [1.0, 2.5])
def test_kl_grad_check(seed, T):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(4, 5))
    t = rng.normal(size=(4, 5))
    out = distill_kl(s, t, T)
    assert out.value >= 0
    assert grad_check(lambda v: distill_kl(v, t, T).value, s, out.grad_logits) < 1e-5
