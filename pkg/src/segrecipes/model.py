"""Per-pixel segmentation network: ReLU feature extractor plus two heads.

The standard head is ``feats @ W2 + b2``.  The cosine head scores each class
by the cosine between its weight column and the pixel feature; in training
mode the fixed prior bias ``tau * log(pi)`` is added, at inference it is not.
``cosine_scale`` multiplies the whole cosine head output (a softmax
temperature), bias included.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointIncompatibleError, InvalidShapeError, UsageError, ConfigError
from .numerics import softmax

PARAM_NAMES = ("W1", "b1", "W2", "b2")
HEAD_KINDS = ("standard", "cosine_la")
MODES = ("train", "infer")


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    head_kind: str = "standard"
    tau: float = 0.0
    eps_norm: float = 1e-8
    cosine_scale: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ConfigError("tau must be finite and >= 0")
        if not self.eps_norm > 0:
            raise ConfigError("eps_norm must be > 0")
        if not (np.isfinite(self.cosine_scale) and self.cosine_scale > 0):
            raise ConfigError("cosine_scale must be finite and > 0")
        D, Hd = self.W1.shape if self.W1.ndim == 2 else (None, None)
        if (self.W1.ndim != 2 or self.b1.shape != (Hd,) or self.W2.ndim != 2
                or self.W2.shape[0] != Hd or self.b2.shape != (self.W2.shape[1],)):
            raise InvalidShapeError(
                "inconsistent parameter shapes: "
                + ", ".join(f"{n}{getattr(self, n).shape}" for n in PARAM_NAMES))

    @property
    def input_dim(self):
        return self.W1.shape[0]

    @property
    def hidden_dim(self):
        return self.W1.shape[1]

    @property
    def num_classes(self):
        return self.W2.shape[1]

    def arrays(self):
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def meta(self):
        return {"head_kind": self.head_kind, "tau": self.tau,
                "eps_norm": self.eps_norm, "cosine_scale": self.cosine_scale}

    def replace(self, **arrays):
        d = {n: getattr(self, n).copy() for n in PARAM_NAMES}
        d.update(arrays)
        return ModelParams(**d, **self.meta())

    def copy(self):
        return self.replace()


@dataclass
class Checkpoint:
    params: ModelParams
    iteration: int = 0
    rng_state_digest: bytes = b""
    config_digest: bytes = b""
    extra: dict = field(default_factory=dict)


def init_params(input_dim, hidden_dim, num_classes, rng, head_kind="standard",
                tau=0.0, eps_norm=1e-8, cosine_scale=1.0):
    W1 = rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_dim))
    b1 = np.full(hidden_dim, 0.1)
    W2 = rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(hidden_dim, num_classes))
    b2 = np.zeros(num_classes)
    return ModelParams(W1, b1, W2, b2, head_kind=head_kind, tau=tau,
                       eps_norm=eps_norm, cosine_scale=cosine_scale)


def check_compatible(a, b):
    """Raise unless two ModelParams share architecture and head settings."""
    for n in PARAM_NAMES:
        if getattr(a, n).shape != getattr(b, n).shape:
            raise CheckpointIncompatibleError(
                f"{n} shape {getattr(a, n).shape} != {getattr(b, n).shape}")
    if a.meta() != b.meta():
        raise CheckpointIncompatibleError(f"head settings differ: {a.meta()} vs {b.meta()}")


def _check_input(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != params.input_dim:
        raise InvalidShapeError(f"input last axis must be {params.input_dim}, got shape {x.shape}")
    return x


def _check_feats(params, feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim < 1 or feats.shape[-1] != params.hidden_dim:
        raise InvalidShapeError(f"feature last axis must be {params.hidden_dim}, got shape {feats.shape}")
    return feats


def extract_features(params, x):
    x = _check_input(params, x)
    return np.maximum(x @ params.W1 + params.b1, 0.0)


def head_standard(params, feats):
    if params.head_kind != "standard":
        raise UsageError(f"head_standard called on a {params.head_kind!r} model")
    feats = _check_feats(params, feats)
    return feats @ params.W2 + params.b2


def _prior_log(prior, num_classes):
    pi = getattr(prior, "pi", prior)
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (num_classes,):
        raise InvalidShapeError(f"prior must have length {num_classes}, got shape {pi.shape}")
    return np.log(pi)


def _col_norms(params):
    return np.maximum(np.linalg.norm(params.W2, axis=0), params.eps_norm)


def cosine_logits(params, feats):
    """Cosine similarity between every feature row and every class weight column."""
    feats = _check_feats(params, feats)
    fn = np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), params.eps_norm)
    return (feats / fn) @ (params.W2 / _col_norms(params))


def head_cosine_la(params, feats, prior=None, mode="train"):
    if params.head_kind != "cosine_la":
        raise UsageError(f"head_cosine_la called on a {params.head_kind!r} model")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    logits = cosine_logits(params, feats)
    if mode == "train":
        if prior is None:
            raise UsageError("train mode needs the class prior")
        logits = logits + params.tau * _prior_log(prior, params.num_classes)
    if params.cosine_scale != 1.0:
        logits = params.cosine_scale * logits
    return logits


def head(params, feats, prior=None, mode="infer"):
    if params.head_kind == "standard":
        return head_standard(params, feats)
    return head_cosine_la(params, feats, prior, mode)


def forward(params, x, prior=None, mode="infer"):
    return head(params, extract_features(params, x), prior, mode)


def _normalize_backward(vec, unit, norm, eps, axis):
    # d(v / max(|v|, eps)) applied to an upstream gradient
    radial = (unit * vec).sum(axis=axis, keepdims=True)
    raw = norm > eps
    return np.where(raw, (vec - unit * radial) / np.maximum(norm, eps), vec / eps)


def head_backward(params, feats, grad_logits):
    """Gradients of W2, b2 and of the features given dLoss/dlogits."""
    feats = _check_feats(params, feats)
    G = np.asarray(grad_logits, dtype=np.float64)
    f2 = feats.reshape(-1, params.hidden_dim)
    G2 = G.reshape(-1, params.num_classes)
    if G2.shape[0] != f2.shape[0]:
        raise InvalidShapeError("grad_logits does not match features")
    if params.head_kind == "standard":
        grads = {"W2": f2.T @ G2, "b2": G2.sum(axis=0)}
        dfeats = G2 @ params.W2.T
    else:
        G2 = params.cosine_scale * G2
        fnorm = np.linalg.norm(f2, axis=1, keepdims=True)
        v = f2 / np.maximum(fnorm, params.eps_norm)
        wnorm = np.linalg.norm(params.W2, axis=0, keepdims=True)
        u = params.W2 / np.maximum(wnorm, params.eps_norm)
        dv = G2 @ u.T
        du = v.T @ G2
        dfeats = _normalize_backward(dv, v, fnorm, params.eps_norm, axis=1)
        grads = {"W2": _normalize_backward(du, u, wnorm, params.eps_norm, axis=0),
                 "b2": np.zeros(params.num_classes)}
    return grads, dfeats.reshape(feats.shape)


def features_backward(params, x, grad_feats):
    x = _check_input(params, x)
    x2 = x.reshape(-1, params.input_dim)
    pre = x2 @ params.W1 + params.b1
    g = np.asarray(grad_feats, dtype=np.float64).reshape(-1, params.hidden_dim) * (pre > 0)
    return {"W1": x2.T @ g, "b1": g.sum(axis=0)}


def backward(params, x, grad_logits):
    """Full parameter gradients given dLoss/dlogits for inputs ``x``."""
    feats = extract_features(params, x)
    grads, dfeats = head_backward(params, feats, grad_logits)
    grads.update(features_backward(params, x, dfeats))
    return {n: grads[n] for n in PARAM_NAMES}


def predict_probs(params, x):
    return softmax(forward(params, x, mode="infer"))


def predict_labels(params, x):
    return forward(params, x, mode="infer").argmax(axis=-1)
