"""Hierarchical ensembling: group averaging, weighted fusion, weight search, TTA."""
from dataclasses import dataclass, field
import math

import numpy as np

from . import metrics
from .errors import InvalidInputError
from .model import Checkpoint, predict_probs
from .numerics import order_free_mean, weighted_sum

DEFAULT_GRID = tuple(round(0.2 * i, 10) for i in range(11))
DEFAULT_SCALES = (0.75, 1.0, 1.25)


@dataclass
class PredictionMap:
    probs: np.ndarray  # (H, W, L)
    frame_id: str
    model_id: str = ""
    fused: bool = False  # fused maps hold unnormalised scores
    config_digest: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise InvalidInputError(f"prediction map must be (H, W, L), got {self.probs.shape}")

    def labels(self):
        return self.probs.argmax(axis=-1)


@dataclass
class GroupSpec:
    strong: list
    weak: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    def __post_init__(self):
        if not self.strong:
            raise InvalidInputError("the strong group must not be empty")
        seen = {}
        for name in ("strong", "weak", "aux"):
            for m in getattr(self, name):
                if m in seen:
                    raise InvalidInputError(f"model {m!r} is in both {seen[m]} and {name}")
                seen[m] = name

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"strong", "weak", "aux"}
        if unknown:
            raise InvalidInputError(f"unknown group keys {sorted(unknown)}")
        return cls(list(d["strong"]), list(d.get("weak", [])), list(d.get("aux", [])))


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 1.4
    beta: float = 1.0

    def __post_init__(self):
        for v in (self.alpha, self.beta):
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"fusion weights must be finite and >= 0, got {v}")


def _check_same(maps):
    ref = maps[0]
    for m in maps[1:]:
        if m.frame_id != ref.frame_id:
            raise InvalidInputError(f"frame ids differ: {ref.frame_id!r} vs {m.frame_id!r}")
        if m.probs.shape != ref.probs.shape:
            raise InvalidInputError(f"shapes differ: {ref.probs.shape} vs {m.probs.shape}")


def group_average(maps):
    maps = list(maps)
    if not maps:
        raise InvalidInputError("cannot average an empty group")
    _check_same(maps)
    if len(maps) == 1:
        m = maps[0]
        return PredictionMap(m.probs.copy(), m.frame_id, m.model_id, m.fused, m.config_digest)
    ids = "+".join(sorted(m.model_id for m in maps))
    return PredictionMap(order_free_mean([m.probs for m in maps]), maps[0].frame_id, ids)


def fuse(strong, weak, aux, weights):
    """strong + alpha * weak + beta * aux, element-wise, without renormalising.

    ``weak`` or ``aux`` may be None for an empty group.
    """
    present = [m for m in (strong, weak, aux) if m is not None]
    _check_same(present)
    terms, coefs = [strong.probs], [1.0]
    if weak is not None:
        terms.append(weak.probs)
        coefs.append(weights.alpha)
    if aux is not None:
        terms.append(aux.probs)
        coefs.append(weights.beta)
    return PredictionMap(weighted_sum(coefs, terms), strong.frame_id, "fused", fused=True)


@dataclass
class GridSearchResult:
    weights: FusionWeights
    miou: float
    alpha_grid: list
    beta_grid: list
    table: np.ndarray  # (len(alpha_grid), len(beta_grid))

    def to_dict(self):
        return {
            "alpha_grid": [float(a) for a in self.alpha_grid],
            "beta_grid": [float(b) for b in self.beta_grid],
            "miou_table": [[float(v) for v in row] for row in self.table],
            "best": {"alpha": self.weights.alpha, "beta": self.weights.beta, "miou": self.miou},
        }


def grid_search(strong, weak, aux, labels, num_classes,
                alpha_grid=DEFAULT_GRID, beta_grid=DEFAULT_GRID):
    """Pick (alpha, beta) maximising val mIoU of the fused argmax.

    ``strong``, ``weak`` and ``aux`` are per-frame lists of group-averaged maps
    (``weak``/``aux`` may be None); ``labels`` are the matching label grids.
    Ties go to the smaller alpha, then the smaller beta.
    """
    alpha_grid = [float(a) for a in alpha_grid]
    beta_grid = [float(b) for b in beta_grid]
    if not alpha_grid or not beta_grid:
        raise InvalidInputError("alpha and beta grids must be non-empty")
    n = len(strong)
    if n == 0 or len(labels) != n:
        raise InvalidInputError("need one label grid per strong map")
    for grp in (weak, aux):
        if grp is not None and len(grp) != n:
            raise InvalidInputError("all groups must cover the same frames")
    table = np.zeros((len(alpha_grid), len(beta_grid)))
    best = None
    for i, a in enumerate(alpha_grid):
        for j, b in enumerate(beta_grid):
            w = FusionWeights(a, b)
            conf = metrics.empty_confusion(num_classes)
            for k in range(n):
                fused = fuse(strong[k], None if weak is None else weak[k],
                             None if aux is None else aux[k], w)
                conf = metrics.accumulate(conf, fused.labels(), labels[k])
            score = metrics.miou(conf).miou
            table[i, j] = score
            key = (score, -a, -b)
            if best is None or key > best[0]:
                best = (key, w)
    return GridSearchResult(best[1], best[0][0], alpha_grid, beta_grid, table)


def _axis_coords(n_in, n_out):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def bilinear_resize(arr, out_h, out_w):
    """Corner-aligned bilinear resampling of an (H, W, C) array.

    Output pixel (i, j) samples source position (i*(H-1)/(h-1), j*(W-1)/(w-1)),
    so the four corners map onto each other exactly.
    """
    a = np.asarray(arr, dtype=np.float64)
    H, W = a.shape[:2]
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"target size ({out_h}, {out_w}) must be positive")
    if (out_h, out_w) == (H, W):
        return a.copy()
    y0, y1, wy = _axis_coords(H, out_h)
    x0, x1, wx = _axis_coords(W, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def predict_map(model, features, frame_id="", model_id=""):
    params = model.params if isinstance(model, Checkpoint) else model
    return PredictionMap(predict_probs(params, features), frame_id, model_id)


def tta_predict(model, frame, scales=DEFAULT_SCALES, flip=True, frame_id="", model_id=""):
    """Average predictions over rescaled (and optionally mirrored) copies of a frame.

    Every variant's probabilities are mapped back to the frame geometry before
    averaging; the average is renormalised per pixel.
    """
    params = model.params if isinstance(model, Checkpoint) else model
    feats = np.asarray(getattr(frame, "features", frame), dtype=np.float64)
    scales = [float(s) for s in scales]
    if not scales:
        raise InvalidInputError("need at least one scale")
    H, W = feats.shape[:2]
    sizes = []
    for s in scales:
        if not (math.isfinite(s) and s > 0):
            raise InvalidInputError(f"scale {s} must be finite and > 0")
        h, w = math.ceil(s * H), math.ceil(s * W)
        if h < 1 or w < 1:
            raise InvalidInputError(f"scale {s} yields an empty frame")
        sizes.append((h, w))
    variants = []
    inputs = [(feats, False)] + ([(feats[:, ::-1], True)] if flip else [])
    for x, mirrored in inputs:
        for h, w in sizes:
            probs = predict_probs(params, bilinear_resize(x, h, w))
            probs = bilinear_resize(probs, H, W)
            variants.append(probs[:, ::-1] if mirrored else probs)
    if len(variants) == 1:
        out = np.ascontiguousarray(variants[0])
    else:
        out = np.add.reduce(variants) / len(variants)
        out = out / out.sum(axis=-1, keepdims=True)
    return PredictionMap(out, frame_id, model_id)
