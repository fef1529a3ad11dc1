"""Stable softmax machinery and a central-difference gradient checker.

Arrays are plain float64 numpy arrays; class operations act on the last axis.
"""
import numpy as np

from .errors import InvalidShapeError, NumericError


def _as_logits(logits):
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise InvalidShapeError(f"need a non-empty class axis, got shape {x.shape}")
    return x


def logsumexp(logits):
    x = _as_logits(logits)
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax(logits):
    x = _as_logits(logits)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    x = _as_logits(logits)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def numeric_grad(f, point, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``point`` (any shape)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(f, point, analytic_grad, eps=1e-5):
    """Max over coordinates of |numeric - analytic| / max(1, |analytic|)."""
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    numeric = numeric_grad(f, point, eps)
    if numeric.shape != analytic.shape:
        raise InvalidShapeError(f"gradient shape {analytic.shape} != point shape {numeric.shape}")
    if numeric.size == 0:
        return 0.0
    err = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())


def order_free_mean(arrays):
    """Element-wise mean of equally shaped arrays, bitwise independent of input order.

    Values are sorted along the stacking axis, then reduced with numpy's
    pairwise summation.
    """
    stack = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])
    if stack.shape[0] == 0:
        raise InvalidShapeError("nothing to average")
    if stack.shape[0] == 1:
        return stack[0].copy()
    srt = np.ascontiguousarray(np.moveaxis(np.sort(stack, axis=0), 0, -1))
    return srt.sum(axis=-1) / stack.shape[0]


_SPLITTER = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    z = s - a
    return s, (a - (s - z)) + (b - z)


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, al * bl - (((p - ah * bh) - al * bh) - ah * bl)


def weighted_sum(weights, arrays):
    """Element-wise sum of ``w_i * a_i`` in compensated (doubled) precision.

    Uses the Dot2 scheme (error-free products and sums), so the result is the
    exact weighted sum rounded once in all but pathological cases.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    p, s = _two_prod(np.float64(weights[0]), arrays[0])
    for w, a in zip(weights[1:], arrays[1:]):
        h, r = _two_prod(np.float64(w), a)
        p, q = _two_sum(p, h)
        s = s + (q + r)
    return p + s
