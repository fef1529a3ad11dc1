"""Synthetic long-tailed "video" segmentation data and class statistics.

Each video gets a Voronoi layout whose cells carry Zipf-distributed classes.
All frames of a video share that layout and a video-level feature offset, so
consecutive frames are near-duplicates, mirroring real video datasets.
"""
from dataclasses import dataclass, field, asdict
import hashlib
import json

import numpy as np

from .errors import ConfigError, EmptyDataError, InvalidLabelError

IGNORE = 255
MAX_CLASSES = 254
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 20
    feature_dim: int = 8
    num_videos: int = 100
    frames_per_video: int = 4
    height: int = 16
    width: int = 16
    zipf_exponent: float = 1.5
    frame_jitter: float = 0.5
    seed: int = 0
    cells_per_video: int = 12
    prototype_scale: float = 1.0
    video_offset: float = 0.3
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        self.validate()

    def validate(self):
        if not 2 <= self.num_classes <= MAX_CLASSES:
            raise ConfigError(f"num_classes must be in [2, {MAX_CLASSES}], got {self.num_classes}")
        if self.height < 2 or self.width < 2:
            raise ConfigError("height and width must be >= 2")
        for name in ("feature_dim", "num_videos", "frames_per_video", "cells_per_video"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("zipf_exponent", "frame_jitter", "prototype_scale", "video_offset"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three nonnegative values summing to 1, got {fr}")

    def to_dict(self):
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return config_digest(self.to_dict())


def config_digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Frame:
    features: np.ndarray  # (H, W, D) float64
    labels: np.ndarray  # (H, W) uint8


@dataclass
class Video:
    index: int
    frames: list
    cell_classes: np.ndarray = None
    sites: np.ndarray = None


@dataclass
class Dataset:
    config: DatasetConfig
    videos: list
    split: dict = field(default_factory=dict)

    def frames(self, split=None):
        """Frames of the named split (all videos if ``split`` is None), in video order."""
        return [f for v in self.split_videos(split) for f in v.frames]

    def split_videos(self, split=None):
        if split is None:
            return list(self.videos)
        if split not in self.split:
            raise ConfigError(f"unknown split {split!r}")
        by_index = {v.index: v for v in self.videos}
        return [by_index[i] for i in self.split[split]]

    def frame_ids(self, split=None):
        return [frame_id(v.index, j) for v in self.split_videos(split) for j in range(len(v.frames))]


def frame_id(video_index, frame_index):
    return f"v{video_index:05d}_f{frame_index:04d}"


@dataclass(frozen=True)
class ClassPrior:
    pi: np.ndarray
    pixel_counts: np.ndarray
    video_counts: np.ndarray

    @property
    def num_classes(self):
        return len(self.pi)

    def log_pi(self):
        return np.log(self.pi)

    def to_dict(self):
        return {
            "pi": [float(p) for p in self.pi],
            "pixel_counts": [int(c) for c in self.pixel_counts],
            "video_counts": [int(c) for c in self.video_counts],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["pi"], dtype=np.float64),
                   np.asarray(d["pixel_counts"], dtype=np.int64),
                   np.asarray(d["video_counts"], dtype=np.int64))


def zipf_probs(num_classes, exponent):
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    w = ranks ** -float(exponent)
    return w / w.sum()


def split_video_indices(num_videos, fractions, rng):
    order = rng.permutation(num_videos)
    n_train = int(round(fractions[0] * num_videos))
    n_val = int(round(fractions[1] * num_videos))
    n_val = min(n_val, num_videos - n_train)
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


def _voronoi_layout(rng, h, w, n_cells):
    sites = rng.uniform(0.0, 1.0, size=(n_cells, 2)) * np.array([h, w], dtype=np.float64)
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    return sites, d2.argmin(axis=-1)


def _f32_exact(a):
    # values representable in float32 so SSEG round-trips bit-exactly
    return a.astype(np.float32).astype(np.float64)


def generate_video(config, prototypes, class_probs, index):
    rng = np.random.default_rng([config.seed, 1, index])
    sites, cell_of = _voronoi_layout(rng, config.height, config.width, config.cells_per_video)
    cell_classes = rng.choice(config.num_classes, size=config.cells_per_video, p=class_probs)
    labels = cell_classes[cell_of].astype(np.uint8)
    offset = rng.normal(0.0, 1.0, size=config.feature_dim) * config.video_offset
    base = prototypes[labels] + offset
    frames = []
    for _ in range(config.frames_per_video):
        noise = rng.normal(0.0, 1.0, size=base.shape) * config.frame_jitter
        frames.append(Frame(_f32_exact(base + noise), labels.copy()))
    return Video(index, frames, cell_classes=cell_classes, sites=sites)


def generate(config):
    """Deterministic synthetic dataset; videos use seeds derived from (seed, index)."""
    if not isinstance(config, DatasetConfig):
        config = DatasetConfig.from_dict(dict(config))
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    prototypes = rng.normal(0.0, 1.0, size=(config.num_classes, config.feature_dim)) * config.prototype_scale
    split = split_video_indices(config.num_videos, config.split_fractions, rng)
    probs = zipf_probs(config.num_classes, config.zipf_exponent)
    videos = [generate_video(config, prototypes, probs, i) for i in range(config.num_videos)]
    return Dataset(config, videos, split)


def pixel_counts(frames, num_classes):
    counts = np.zeros(num_classes, dtype=np.int64)
    for f in frames:
        lab = f.labels.reshape(-1)
        lab = lab[lab != IGNORE]
        if lab.size and int(lab.max()) >= num_classes:
            raise InvalidLabelError(f"label {int(lab.max())} outside [0, {num_classes})")
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    return counts


def compute_prior(dataset, split="train"):
    """Add-one smoothed pixel-frequency prior over ``split`` (all videos if None)."""
    L = dataset.config.num_classes
    videos = dataset.split_videos(split)
    counts = np.zeros(L, dtype=np.int64)
    video_counts = np.zeros(L, dtype=np.int64)
    for v in videos:
        c = pixel_counts(v.frames, L)
        counts += c
        video_counts += c > 0
    total = int(counts.sum())
    if total == 0:
        raise EmptyDataError("no labelled (non-ignore) pixels to estimate a prior from")
    pi = (counts + 1.0) / (total + L)
    return ClassPrior(pi, counts, video_counts)
