"""Training objectives with closed-form gradients w.r.t. the logits.

Losses act on logits of shape (..., L) with integer labels of the leading
shape; label 255 marks ignored pixels.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import model as _model
from .errors import ConfigError, EmptySelectionError, InvalidLabelError, InvalidShapeError
from .numerics import log_softmax, softmax

IGNORE = 255


@dataclass
class LossOutput:
    value: float
    grad_logits: np.ndarray
    selected_count: int = None
    param_grads: dict = None
    grad_feats: np.ndarray = None


@dataclass(frozen=True)
class OhemConfig:
    conf_threshold: float = 0.7
    min_keep: int = None  # None: min_keep_fraction of the valid pixels
    min_keep_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.conf_threshold <= 1:
            raise ConfigError(f"conf_threshold must lie in (0, 1], got {self.conf_threshold}")
        if self.min_keep is not None and int(self.min_keep) < 0:
            raise ConfigError("min_keep must be >= 0")
        if not 0 <= self.min_keep_fraction <= 1:
            raise ConfigError("min_keep_fraction must lie in [0, 1]")

    def resolve_min_keep(self, n_valid):
        if self.min_keep is not None:
            return int(self.min_keep)
        return int(math.ceil(self.min_keep_fraction * n_valid))


def _flatten(logits, labels, ignore):
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise InvalidShapeError(f"bad logits shape {x.shape}")
    y = np.asarray(labels)
    if y.shape != x.shape[:-1]:
        raise InvalidShapeError(f"labels shape {y.shape} does not match logits {x.shape}")
    L = x.shape[-1]
    x2 = x.reshape(-1, L)
    y2 = y.reshape(-1).astype(np.int64)
    valid = y2 != ignore
    bad = valid & ((y2 < 0) | (y2 >= L))
    if bad.any():
        raise InvalidLabelError(f"label {int(y2[bad][0])} outside [0, {L})")
    return x, x2, y2, valid


def ce_loss(logits, labels, ignore=IGNORE, mask=None):
    """Mean softmax cross-entropy over non-ignored (and ``mask``-selected) pixels."""
    x, x2, y2, valid = _flatten(logits, labels, ignore)
    sel = valid if mask is None else valid & np.asarray(mask, dtype=bool).reshape(-1)
    count = int(sel.sum())
    if count == 0:
        raise EmptySelectionError("no pixels selected for the loss")
    rows = np.nonzero(sel)[0]
    logp = log_softmax(x2[rows])
    value = -logp[np.arange(count), y2[rows]].sum() / count
    grad = np.zeros_like(x2)
    g = np.exp(logp)
    g[np.arange(count), y2[rows]] -= 1.0
    grad[rows] = g / count
    return LossOutput(float(value), grad.reshape(x.shape), selected_count=count)


def la_ce_loss(params, feats, prior, labels, ignore=IGNORE):
    """Cross-entropy on prior-adjusted cosine logits; returns W2 and feature gradients."""
    logits = _model.head_cosine_la(params, feats, prior, mode="train")
    out = ce_loss(logits, labels, ignore)
    grads, dfeats = _model.head_backward(params, feats, out.grad_logits)
    out.param_grads = grads
    out.grad_feats = dfeats
    return out


def ohem_select(gt_probs, labels, cfg, ignore=IGNORE):
    """Boolean mask of hard pixels.

    Every valid pixel whose ground-truth probability is below the threshold is
    kept; if that leaves fewer than ``min_keep`` pixels, the least confident of
    the rest are added (ties by ascending index) up to ``min(min_keep, n_valid)``.
    """
    p = np.asarray(gt_probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise InvalidShapeError("gt_probs and labels differ in size")
    valid = y != ignore
    n_valid = int(valid.sum())
    if cfg.conf_threshold >= 1.0:
        return valid.copy()
    sel = valid & (p < cfg.conf_threshold)
    want = min(cfg.resolve_min_keep(n_valid), n_valid)
    short = want - int(sel.sum())
    if short > 0:
        rest = np.nonzero(valid & ~sel)[0]
        order = rest[np.lexsort((rest, p[rest]))]
        sel[order[:short]] = True
    return sel


def gt_probabilities(logits, labels, ignore=IGNORE):
    _, x2, y2, valid = _flatten(logits, labels, ignore)
    probs = softmax(x2)
    out = np.ones(len(y2))
    idx = np.nonzero(valid)[0]
    out[idx] = probs[idx, y2[idx]]
    return out


def ohem_ce_loss(logits, labels, cfg, ignore=IGNORE):
    gt = gt_probabilities(logits, labels, ignore)
    mask = ohem_select(gt, np.asarray(labels).reshape(-1), cfg, ignore)
    return ce_loss(logits, labels, ignore, mask=mask)


def distill_kl(student_logits, teacher_logits, temperature=1.0):
    """Mean over pixels of KL(teacher || student) on temperature-softened logits.

    The teacher is a constant; the gradient is w.r.t. the student logits only.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise InvalidShapeError(f"student {s.shape} vs teacher {t.shape}")
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    L = s.shape[-1]
    s2 = s.reshape(-1, L) / temperature
    t2 = t.reshape(-1, L) / temperature
    n = s2.shape[0]
    if n == 0:
        raise EmptySelectionError("no pixels for distillation")
    log_ps = log_softmax(s2)
    log_pt = log_softmax(t2)
    pt = np.exp(log_pt)
    value = max(float((pt * (log_pt - log_ps)).sum() / n), 0.0)
    grad = (np.exp(log_ps) - pt) / (temperature * n)
    return LossOutput(value, grad.reshape(s.shape), selected_count=n)
