import math

import mpmath
import numpy as np
import pytest

from segrecipes import model as M
from segrecipes.errors import CheckpointIncompatibleError, EmptyDataError
from segrecipes.swa import average_checkpoints


def ckpt(rng, it=0, shape=(3, 4, 5), head_kind="standard"):
    D, H, L = shape
    p = M.ModelParams(rng.normal(size=(D, H)), rng.normal(size=H), rng.normal(size=(H, L)),
                      rng.normal(size=L), head_kind=head_kind)
    return M.Checkpoint(p, it, bytes([it % 256]), b"cfg")


def mp_mean(values):
    with mpmath.workdps(50):
        return float(mpmath.fsum(mpmath.mpf(float(v)) for v in values) / len(values))


def test_mean_of_copies():
    c = ckpt(np.random.default_rng(0))
    out = average_checkpoints([c] * 7)
    for n in M.PARAM_NAMES:
        np.testing.assert_allclose(getattr(out.params, n), getattr(c.params, n), rtol=0, atol=1e-12)


def test_single_checkpoint_is_bitwise():
    c = ckpt(np.random.default_rng(1), it=40)
    out = average_checkpoints([c])
    for n in M.PARAM_NAMES:
        assert getattr(out.params, n).tobytes() == getattr(c.params, n).tobytes()
    assert out.iteration == 40


def test_two_point_mean():
    a = M.ModelParams(np.array([[1.0, 3.0]]), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    b = a.replace(W1=np.array([[3.0, 5.0]]))
    out = average_checkpoints([M.Checkpoint(a, 10), M.Checkpoint(b, 20)])
    np.testing.assert_array_equal(out.params.W1, [[2.0, 4.0]])
    assert out.iteration == 20


def test_matches_extended_precision_oracle_and_order():
    rng = np.random.default_rng(2)
    snaps = [ckpt(rng, it=100 * (i + 1)) for i in range(10)]
    out = average_checkpoints(snaps)
    for n in M.PARAM_NAMES:
        stack = np.stack([getattr(s.params, n) for s in snaps]).reshape(10, -1)
        oracle = np.array([mp_mean(stack[:, k]) for k in range(stack.shape[1])])
        np.testing.assert_allclose(getattr(out.params, n).reshape(-1), oracle, rtol=0, atol=1e-12)
    for _ in range(10):
        perm = rng.permutation(10)
        again = average_checkpoints([snaps[i] for i in perm])
        for n in M.PARAM_NAMES:
            assert getattr(again.params, n).tobytes() == getattr(out.params, n).tobytes()
        assert again.iteration == 1000


def test_linearity():
    rng = np.random.default_rng(3)
    a, b = ckpt(rng), ckpt(rng)
    c = 2.75
    scaled = [M.Checkpoint(x.params.replace(**{n: c * getattr(x.params, n) for n in M.PARAM_NAMES}))
              for x in (a, b)]
    lhs = average_checkpoints(scaled)
    rhs = average_checkpoints([a, b])
    for n in M.PARAM_NAMES:
        np.testing.assert_allclose(getattr(lhs.params, n), c * getattr(rhs.params, n), rtol=0, atol=1e-12)


def test_errors():
    rng = np.random.default_rng(4)
    with pytest.raises(EmptyDataError):
        average_checkpoints([])
    with pytest.raises(CheckpointIncompatibleError):
        average_checkpoints([ckpt(rng), ckpt(rng, shape=(3, 6, 5))])
    with pytest.raises(CheckpointIncompatibleError):
        average_checkpoints([ckpt(rng), ckpt(rng, head_kind="cosine_la")])
