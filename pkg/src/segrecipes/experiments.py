"""Seeded comparison experiments driven by JSON recipes.

A recipe names its ``kind`` (``longtail``, ``swa`` or ``distill``), the
seeds to run, ``data`` and ``train`` overrides, and ``min_wins``.  Each run
returns a JSON-ready report with per-seed rows and the win count.
"""
import time

import numpy as np

from .datagen import DatasetConfig, compute_prior, generate
from .metrics import subset_miou
from .swa import average_checkpoints
from .trainer import DistillConfig, TrainConfig, evaluate, mean_ce, train


def _dataset(recipe, seed):
    return generate(DatasetConfig(seed=seed, **recipe.get("data", {})))


def _train_cfg(recipe, seed, **extra):
    kw = dict(recipe.get("train", {}))
    kw.update(extra)
    return TrainConfig(seed=seed, **kw)


def _eval_frames(ds, splits):
    return [f for s in splits for f in ds.frames(s)]


def longtail_seed(recipe, seed):
    """Tail-class mIoU of plain CE versus logit-adjusted CE on one seed."""
    ds = _dataset(recipe, seed)
    L = ds.config.num_classes
    tail = list(range(L - recipe.get("tail_size", 5), L))
    prior = compute_prior(ds)
    frames = _eval_frames(ds, recipe.get("eval_splits", ["val"]))
    row = {"seed": seed, "head_tail_ratio": head_tail_ratio(prior.pixel_counts, tail)}
    for kind in ("ce", "la_ce"):
        over = recipe.get(kind, {})
        result = train(_train_cfg(recipe, seed, loss_kind=kind, **over), ds, prior=prior)
        report = evaluate(result.final.params, frames, L)
        row[kind] = {"tail_miou": subset_miou(report, tail) or 0.0, "miou": report.miou}
    row["win"] = row["la_ce"]["tail_miou"] > row["ce"]["tail_miou"]
    return row


def swa_seed(recipe, seed):
    """Val mIoU of the snapshot average versus the last snapshot."""
    ds = _dataset(recipe, seed)
    result = train(_train_cfg(recipe, seed), ds)
    frames = _eval_frames(ds, recipe.get("eval_splits", ["val"]))
    L = ds.config.num_classes
    avg = evaluate(average_checkpoints(result.snapshots).params, frames, L).miou
    last = evaluate(result.snapshots[-1].params, frames, L).miou
    return {"seed": seed, "snapshots": len(result.snapshots), "swa_miou": avg,
            "final_miou": last, "win": avg >= last}


def distill_seed(recipe, seed):
    """Generalisation gap (val CE minus train CE) with and without distillation.

    The teacher has the student's architecture but is trained separately,
    with its own seed and the ``teacher`` overrides.
    """
    ds = _dataset(recipe, seed)
    train_frames, val_frames = ds.frames("train"), _eval_frames(ds, recipe.get("eval_splits", ["val"]))
    teacher_seed = seed + recipe.get("teacher_seed_offset", 1000)
    teacher = train(_train_cfg(recipe, teacher_seed, **recipe.get("teacher", {})), ds).final
    row = {"seed": seed}
    lam = recipe.get("lam", 1.0)
    for name, weight in (("plain", 0.0), ("distilled", lam)):
        d = DistillConfig(teacher, lam=weight, temperature=recipe.get("temperature", 1.0))
        params = train(_train_cfg(recipe, seed, distill=d), ds).final.params
        tr, va = mean_ce(params, train_frames), mean_ce(params, val_frames)
        row[name] = {"train_ce": tr, "val_ce": va, "gap": va - tr}
    row["win"] = row["distilled"]["gap"] < row["plain"]["gap"]
    return row


RUNNERS = {"longtail": longtail_seed, "swa": swa_seed, "distill": distill_seed}


def run_recipe(recipe, seeds=None, log=None):
    """Run every seed of ``recipe``; ``passed`` means wins >= min_wins."""
    kind = recipe["kind"]
    runner = RUNNERS[kind]
    seeds = list(range(recipe.get("seeds", 10))) if seeds is None else list(seeds)
    t0 = time.perf_counter()
    rows = []
    for seed in seeds:
        rows.append(runner(recipe, seed))
        if log:
            log(rows[-1])
    wins = int(sum(r["win"] for r in rows))
    return {"kind": kind, "rows": rows, "wins": wins, "runs": len(rows),
            "min_wins": recipe.get("min_wins"), "passed": wins >= recipe.get("min_wins", len(rows)),
            "seconds": round(time.perf_counter() - t0, 1),
            "recipe": {k: v for k, v in recipe.items() if k != "kind"}}


def head_tail_ratio(pixel_counts, tail):
    """Pixel count of the most frequent class over the mean count of ``tail``."""
    counts = np.asarray(pixel_counts, dtype=np.float64)
    return float(counts.max() / max(counts[list(tail)].mean(), 1.0))
