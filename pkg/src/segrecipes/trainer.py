"""Mini-batch SGD with momentum, a cyclical-LR averaging tail, and distillation.

Training runs ``total_iters`` iterations at ``base_lr``, then
``swa_extra_iters`` more under a cosine cyclical schedule, saving one
snapshot at the end of every cycle.
"""
from dataclasses import dataclass, field, asdict
import hashlib
import json
import math

import numpy as np

from . import losses
from . import metrics
from . import model as M
from .datagen import compute_prior, config_digest
from .errors import ConfigError, EmptyDataError, TrainingDivergedError

LOSS_KINDS = ("ce", "ce_ohem", "la_ce")


@dataclass(frozen=True)
class DistillConfig:
    teacher: object = None  # Checkpoint, ModelParams, or path to an SWCK file
    lam: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ConfigError("distill lambda must be finite and >= 0")
        if not self.temperature > 0:
            raise ConfigError("distill temperature must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    lr_min: float = 0.01
    lr_max: float = 0.1
    momentum: float = 0.9
    total_iters: int = 1000
    swa_extra_iters: int = 1000
    snapshot_interval: int = 100
    cycle_length: int = 100
    batch_frames: int = 4
    loss_kind: str = "ce"
    distill: DistillConfig = None
    seed: int = 0
    hidden_dim: int = 32
    head_kind: str = None  # None: cosine_la for la_ce, standard otherwise
    tau: float = 0.03
    cosine_scale: float = 1.0
    eps_norm: float = 1e-8
    ohem: losses.OhemConfig = field(default_factory=losses.OhemConfig)
    ohem_with_la: bool = False
    eval_interval: int = None  # None: snapshot_interval

    def __post_init__(self):
        if isinstance(self.ohem, dict):
            object.__setattr__(self, "ohem", losses.OhemConfig(**self.ohem))
        if isinstance(self.distill, dict):
            object.__setattr__(self, "distill", DistillConfig(**self.distill))
        self.validate()

    def validate(self):
        for name in ("base_lr", "lr_min", "lr_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must not exceed lr_max")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.total_iters < 0 or self.swa_extra_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.snapshot_interval < 1 or self.cycle_length < 1 or self.batch_frames < 1:
            raise ConfigError("snapshot_interval, cycle_length and batch_frames must be >= 1")
        if self.swa_extra_iters % self.snapshot_interval:
            raise ConfigError("snapshot_interval must divide swa_extra_iters")
        if self.cycle_length != self.snapshot_interval:
            raise ConfigError("cycle_length must equal snapshot_interval (one snapshot per cycle)")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.head_kind not in (None,) + M.HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {M.HEAD_KINDS}")
        if self.loss_kind == "la_ce" and self.resolved_head() != "cosine_la":
            raise ConfigError("la_ce needs the cosine_la head")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.eval_interval is not None and self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def resolved_head(self):
        if self.head_kind is not None:
            return self.head_kind
        return "cosine_la" if self.loss_kind == "la_ce" else "standard"

    def to_dict(self):
        d = asdict(self)
        d["ohem"] = asdict(self.ohem)
        if self.distill is not None:
            teacher = self.distill.teacher
            d["distill"] = {"teacher": teacher if isinstance(teacher, str) else None,
                            "lam": self.distill.lam, "temperature": self.distill.temperature}
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return config_digest(self.to_dict())


@dataclass
class TrainResult:
    final: M.Checkpoint
    snapshots: list
    log: list


def cyclic_lr(t, cfg):
    """Cosine-annealed rate restarting every ``cfg.cycle_length`` steps."""
    if t < 0:
        raise ValueError("iteration must be >= 0")
    c = cfg.cycle_length
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * (t % c) / c))


def lr_at(it, cfg):
    if it < cfg.total_iters:
        return cfg.base_lr
    return cyclic_lr(it - cfg.total_iters, cfg)


def _as_params(obj):
    if isinstance(obj, str):
        from .formats import load_checkpoint
        obj = load_checkpoint(obj)
    return obj.params if isinstance(obj, M.Checkpoint) else obj


def base_loss(cfg, logits, labels):
    if cfg.loss_kind == "ce_ohem" or (cfg.loss_kind == "la_ce" and cfg.ohem_with_la):
        return losses.ohem_ce_loss(logits, labels, cfg.ohem)
    return losses.ce_loss(logits, labels)


def loss_and_grads(params, x, labels, cfg, prior=None, teacher=None):
    """Objective value, parameter gradients and the base-loss output for one batch.

    ``x`` is (N, D), ``labels`` is (N,).  With a ``teacher`` the objective is
    base loss + lam * KL(teacher || student).
    """
    feats = M.extract_features(params, x)
    logits = M.head(params, feats, prior, mode="train")
    out = base_loss(cfg, logits, labels)
    value, grad = out.value, out.grad_logits
    if teacher is not None:
        t_logits = M.forward(teacher, x, prior, mode="train")
        kl = losses.distill_kl(logits, t_logits, cfg.distill.temperature)
        value = value + cfg.distill.lam * kl.value
        grad = grad + cfg.distill.lam * kl.grad_logits
    grads, dfeats = M.head_backward(params, feats, grad)
    grads.update(M.features_backward(params, x, dfeats))
    return value, {n: grads[n] for n in M.PARAM_NAMES}, out


def sgd_step(params, velocity, grads, lr, momentum):
    """Heavy-ball update: v <- momentum*v + g; p <- p - lr*v.  Returns new (params, velocity)."""
    new_v = {n: momentum * velocity[n] + grads[n] for n in M.PARAM_NAMES}
    new_p = params.replace(**{n: getattr(params, n) - lr * new_v[n] for n in M.PARAM_NAMES})
    return new_p, new_v


def stack_frames(frames):
    x = np.concatenate([f.features.reshape(-1, f.features.shape[-1]) for f in frames])
    y = np.concatenate([f.labels.reshape(-1) for f in frames])
    return x, y


def evaluate(params, frames, num_classes):
    """IoU report of argmax predictions (inference mode) over ``frames``."""
    conf = metrics.empty_confusion(num_classes)
    for f in frames:
        conf = metrics.accumulate(conf, M.predict_labels(params, f.features), f.labels)
    return metrics.miou(conf)


def mean_ce(params, frames, prior=None, mode="infer"):
    """Pixel-mean cross-entropy of the model over ``frames``."""
    x, y = stack_frames(frames)
    return losses.ce_loss(M.forward(params, x, prior, mode), y).value


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).digest()


def _init_model(cfg, dataset):
    c = dataset.config
    rng = np.random.default_rng([cfg.seed, 2])
    return M.init_params(c.feature_dim, cfg.hidden_dim, c.num_classes, rng,
                         head_kind=cfg.resolved_head(), tau=cfg.tau,
                         eps_norm=cfg.eps_norm, cosine_scale=cfg.cosine_scale)


def train(cfg, dataset, init=None, prior=None, log_fn=None):
    """Run the full schedule on the train split; returns final checkpoint, snapshots, log.

    ``init`` overrides the seeded initialisation; ``prior`` defaults to the
    train-split pixel prior.  ``log_fn`` receives each metric record.
    """
    train_frames = dataset.frames("train")
    if not train_frames:
        raise EmptyDataError("the train split has no frames")
    val_frames = dataset.frames("val") if dataset.split.get("val") else []
    L = dataset.config.num_classes
    if prior is None:
        prior = compute_prior(dataset, "train")

    params = _init_model(cfg, dataset) if init is None else _as_params(init).copy()
    teacher = None
    if cfg.distill is not None:
        teacher = _as_params(cfg.distill.teacher)
        M.check_compatible(params, teacher)

    cfg_digest = hashlib.sha256((cfg.digest() + dataset.config.digest()).encode()).digest()
    shuffle = np.random.default_rng([cfg.seed, 3])
    velocity = {n: np.zeros_like(getattr(params, n)) for n in M.PARAM_NAMES}
    eval_every = cfg.eval_interval or cfg.snapshot_interval
    end = cfg.total_iters + cfg.swa_extra_iters

    order, pos = shuffle.permutation(len(train_frames)), 0
    snapshots, log = [], []
    loss_sum, loss_n, selected = 0.0, 0, None

    def checkpoint(it):
        return M.Checkpoint(params.copy(), it, _digest(shuffle.bit_generator.state), cfg_digest)

    for it in range(end):
        batch = []
        while len(batch) < cfg.batch_frames:
            if pos == len(order):
                order, pos = shuffle.permutation(len(train_frames)), 0
            batch.append(train_frames[order[pos]])
            pos += 1
        x, y = stack_frames(batch)
        lr = lr_at(it, cfg)
        value, grads, out = loss_and_grads(params, x, y, cfg, prior, teacher)
        if not math.isfinite(value):
            raise TrainingDivergedError(it, value)
        params, velocity = sgd_step(params, velocity, grads, lr, cfg.momentum)
        if not all(np.isfinite(a).all() for a in params.arrays().values()):
            raise TrainingDivergedError(it, "non-finite parameters")
        loss_sum += value
        loss_n += 1
        if cfg.loss_kind == "ce_ohem" or cfg.ohem_with_la:
            selected = out.selected_count

        done = it + 1
        if done > cfg.total_iters and (done - cfg.total_iters) % cfg.snapshot_interval == 0:
            snapshots.append(checkpoint(done))
        if done % eval_every == 0 or done == end:
            rec = {"iter": done, "lr": lr, "train_loss": loss_sum / loss_n,
                   "val_miou": evaluate(params, val_frames, L).miou if val_frames else None}
            if selected is not None:
                rec["selected_count"] = selected
            log.append(rec)
            if log_fn is not None:
                log_fn(rec)
            loss_sum, loss_n = 0.0, 0

    return TrainResult(checkpoint(end), snapshots, log)


def train_distilled(cfg, dataset, init=None, prior=None, log_fn=None):
    """Same as :func:`train`, but requires a teacher in ``cfg.distill``."""
    if cfg.distill is None or cfg.distill.teacher is None:
        raise ConfigError("train_distilled needs cfg.distill with a teacher")
    return train(cfg, dataset, init=init, prior=prior, log_fn=log_fn)
