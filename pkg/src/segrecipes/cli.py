"""Command-line pipelines: gen-data, priors, train, swa, predict, ensemble-search, eval.

Every command takes ``--config`` (JSON with ``data``, ``train``, ``ohem``,
``distill``, ``fusion``, ``tta`` and ``eval`` sections) plus overrides of the
form ``--section.key value``.  Failures exit non-zero with a JSON error on
stderr.
"""
import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import hashlib
import json
import os
from pathlib import Path
import sys

import numpy as np

from . import ensemble, formats, metrics, swa
from .datagen import DatasetConfig, compute_prior, config_digest, generate
from .errors import ConfigError, InvalidInputError, SegRecipesError
from .losses import OhemConfig
from .model import predict_labels
from .trainer import DistillConfig, TrainConfig, train

SECTIONS = ("data", "train", "ohem", "distill", "fusion", "tta", "eval")


@dataclass(frozen=True)
class TTAConfig:
    enabled: bool = False
    scales: tuple = ensemble.DEFAULT_SCALES
    flip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or min(self.scales) <= 0:
            raise ConfigError("tta scales must be a non-empty list of positive numbers")


@dataclass(frozen=True)
class FusionConfig:
    alpha_grid: tuple = ensemble.DEFAULT_GRID
    beta_grid: tuple = ensemble.DEFAULT_GRID

    def __post_init__(self):
        for name in ("alpha_grid", "beta_grid"):
            grid = tuple(float(v) for v in getattr(self, name))
            if not grid or min(grid) < 0:
                raise ConfigError(f"{name} must be a non-empty list of nonnegative numbers")
            object.__setattr__(self, name, grid)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "val"

    def __post_init__(self):
        if self.split not in ("train", "val", "test", "all"):
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    raw: dict = field(default_factory=dict)

    def digest(self):
        return config_digest(self.raw)


def _build(cls, section, values):
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_overrides(tokens):
    """``['--train.total_iters', '500']`` -> ``{'train': {'total_iters': 500}}``."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        section, key = tok[2:].split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            raw = next(it)
        except StopIteration:
            raise ConfigError(f"missing value for {tok}") from None
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        out.setdefault(section, {})[key] = value
    return out


def load_run_config(path=None, overrides=None, seed=None):
    raw = {}
    if path:
        with open(path) as fh:
            raw = json.load(fh)
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    raw = {k: dict(v) for k, v in raw.items()}
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    if seed is not None:
        raw.setdefault("data", {})["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed
    train_kw = dict(raw.get("train", {}))
    if "ohem" in raw:
        train_kw["ohem"] = _build(OhemConfig, "ohem", raw["ohem"])
    if "distill" in raw:
        d = dict(raw["distill"])
        teacher = d.get("teacher")
        if not teacher:
            raise ConfigError("[distill] needs a teacher checkpoint path")
        train_kw["distill"] = _build(DistillConfig, "distill", d)
    return RunConfig(
        data=_build(DatasetConfig, "data", raw.get("data", {})),
        train=_build(TrainConfig, "train", train_kw),
        fusion=_build(FusionConfig, "fusion", raw.get("fusion", {})),
        tta=_build(TTAConfig, "tta", raw.get("tta", {})),
        eval=_build(EvalConfig, "eval", raw.get("eval", {})),
        raw=raw,
    )


def resolve_threads(arg):
    if arg is None:
        env = os.environ.get("SEGRECIPES_THREADS")
        arg = int(env) if env else 1
    if int(arg) < 1:
        raise ConfigError("--threads must be >= 1")
    return int(arg)


def _map(fn, items, threads):
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _split_name(split):
    return None if split == "all" else split


def _split_frames(dataset, split):
    name = _split_name(split)
    return list(zip(dataset.frame_ids(name), dataset.frames(name)))


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, rc):
    ds = generate(rc.data)
    formats.save_dataset(ds, args.out)
    return {"out": str(args.out), "config_digest": rc.data.digest(),
            "videos": {k: len(v) for k, v in ds.split.items()}}


def cmd_priors(args, rc):
    ds = formats.load_dataset(args.dataset)
    prior = compute_prior(ds, _split_name(args.split))
    report = prior.to_dict()
    report.update(split=args.split, config_digest=ds.config.digest())
    if args.out:
        write_json(args.out, report)
    return report


def cmd_train(args, rc):
    ds = formats.load_dataset(args.dataset)
    out = Path(args.out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    for stale in (out / "snapshots").glob("*.swck"):
        stale.unlink()
    records = []
    result = train(rc.train, ds, log_fn=records.append)
    formats.save_checkpoint(result.final, out / "final.swck")
    for snap in result.snapshots:
        formats.save_checkpoint(snap, out / "snapshots" / f"snap_{snap.iteration:08d}.swck")
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {"final_iteration": result.final.iteration, "snapshots": len(result.snapshots),
               "config_digest": result.final.config_digest.hex(),
               "last": records[-1] if records else None}
    write_json(out / "train_summary.json", summary)
    return summary


def cmd_swa(args, rc):
    paths = sorted(Path(args.snapshot_dir).glob("*.swck"))
    if not paths:
        raise InvalidInputError(f"no .swck files in {args.snapshot_dir}")
    avg = swa.average_checkpoints([formats.load_checkpoint(p) for p in paths])
    formats.save_checkpoint(avg, args.out)
    return {"out": str(args.out), "averaged": len(paths), "iteration": avg.iteration,
            "config_digest": avg.config_digest.hex()}


def _tta_settings(args, rc):
    enabled = rc.tta.enabled or args.tta
    scales = rc.tta.scales if args.scales is None else tuple(float(s) for s in args.scales.split(","))
    flip = rc.tta.flip if args.flip is None else args.flip
    return enabled, TTAConfig(enabled, scales, flip)


def cmd_predict(args, rc):
    ckpt = formats.load_checkpoint(args.checkpoint)
    ds = formats.load_dataset(args.dataset)
    enabled, tta = _tta_settings(args, rc)
    model_id = args.model_id or Path(args.checkpoint).stem
    digest = config_digest({"checkpoint": ckpt.config_digest.hex(), "data": ds.config.digest(),
                            "tta": asdict(tta) if enabled else None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = args.split or rc.eval.split

    def one(item):
        fid, frame = item
        if enabled:
            pm = ensemble.tta_predict(ckpt, frame, tta.scales, tta.flip, fid, model_id)
        else:
            pm = ensemble.predict_map(ckpt, frame.features, fid, model_id)
        pm.config_digest = digest
        formats.save_pmap(pm, out / f"{fid}.pmap")
        return fid

    written = _map(one, _split_frames(ds, split), args.threads)
    return {"out": str(out), "frames": len(written), "model_id": model_id, "tta": enabled,
            "config_digest": digest}


def _load_pmap_dirs(dirs):
    by_model = {}
    for d in dirs:
        for p in sorted(Path(d).glob("*.pmap")):
            pm = formats.load_pmap(p)
            by_model.setdefault(pm.model_id, {})[pm.frame_id] = pm
    return by_model


def cmd_ensemble_search(args, rc):
    with open(args.groups) as fh:
        groups = ensemble.GroupSpec.from_dict(json.load(fh))
    ds = formats.load_dataset(args.dataset)
    split = args.split or rc.eval.split
    frames = _split_frames(ds, split)
    by_model = _load_pmap_dirs(args.pmaps)

    def group_maps(ids):
        if not ids:
            return None
        missing = [m for m in ids if m not in by_model]
        if missing:
            raise InvalidInputError(f"no prediction maps for models {missing}")
        out = []
        for fid, _ in frames:
            try:
                out.append(ensemble.group_average([by_model[m][fid] for m in ids]))
            except KeyError:
                raise InvalidInputError(f"frame {fid} missing from a member of {ids}") from None
        return out

    alpha = rc.fusion.alpha_grid if args.alpha_grid is None else [float(v) for v in args.alpha_grid.split(",")]
    beta = rc.fusion.beta_grid if args.beta_grid is None else [float(v) for v in args.beta_grid.split(",")]
    res = ensemble.grid_search(group_maps(groups.strong), group_maps(groups.weak), group_maps(groups.aux),
                               [f.labels for _, f in frames], ds.config.num_classes, alpha, beta)
    report = res.to_dict()
    report["groups"] = asdict(groups)
    report["config_digest"] = config_digest({"groups": asdict(groups), "data": ds.config.digest(),
                                             "alpha": list(alpha), "beta": list(beta)})
    write_json(args.out, report)
    return report


def cmd_eval(args, rc):
    ds = formats.load_dataset(args.dataset)
    split = args.split or rc.eval.split
    frames = _split_frames(ds, split)
    L = ds.config.num_classes
    if (args.pmaps is None) == (args.checkpoint is None):
        raise InvalidInputError("give exactly one of --pmaps or --checkpoint")
    if args.checkpoint:
        ckpt = formats.load_checkpoint(args.checkpoint)
        preds = _map(lambda item: predict_labels(ckpt.params, item[1].features), frames, args.threads)
        source = {"checkpoint": ckpt.config_digest.hex()}
    else:
        maps = {}
        for p in sorted(Path(args.pmaps).glob("*.pmap")):
            pm = formats.load_pmap(p)
            maps[pm.frame_id] = pm
        missing = [fid for fid, _ in frames if fid not in maps]
        if missing:
            raise InvalidInputError(f"{len(missing)} frames have no prediction map, e.g. {missing[0]}")
        preds = [maps[fid].labels() for fid, _ in frames]
        source = {"pmaps": sorted({m.config_digest for m in maps.values()})}
    conf = metrics.empty_confusion(L)
    for pred, (_, frame) in zip(preds, frames):
        conf = metrics.accumulate(conf, pred, frame.labels)
    report = metrics.miou(conf).to_dict()
    report.update(split=split, config_digest=config_digest({"data": ds.config.digest(), **source}))
    if args.out:
        write_json(args.out, report)
    return report


def cmd_experiment(args, rc):
    from . import experiments

    with open(args.recipe) as fh:
        recipe = json.load(fh)
    report = experiments.run_recipe(recipe)
    if args.out:
        write_json(args.out, report)
    return report


def build_parser():
    p = argparse.ArgumentParser(prog="segrecipes", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--threads", type=int, help="worker threads (default $SEGRECIPES_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic SSEG dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("priors", parents=[common], help="class prior and pixel/video counts")
    s.add_argument("dataset")
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_priors)

    s = sub.add_parser("train", parents=[common], help="train; writes checkpoints and a metric log")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("swa", parents=[common], help="average every checkpoint in a directory")
    s.add_argument("snapshot_dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swa)

    s = sub.add_parser("predict", parents=[common], help="write PMAP files for a split")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.add_argument("--model-id")
    s.add_argument("--tta", action="store_true")
    s.add_argument("--scales", help="comma-separated TTA scales")
    s.add_argument("--flip", dest="flip", action="store_true", default=None)
    s.add_argument("--no-flip", dest="flip", action="store_false")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble-search", parents=[common], help="grid-search fusion weights on val")
    s.add_argument("groups", help="JSON file with strong/weak/aux model id lists")
    s.add_argument("--pmaps", nargs="+", required=True, help="directories of PMAP files")
    s.add_argument("--dataset", required=True)
    s.add_argument("--split")
    s.add_argument("--alpha-grid")
    s.add_argument("--beta-grid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ensemble_search)

    s = sub.add_parser("eval", parents=[common], help="mIoU report from PMAPs or a checkpoint")
    s.add_argument("dataset")
    s.add_argument("--pmaps")
    s.add_argument("--checkpoint")
    s.add_argument("--split")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("experiment", parents=[common], help="run a committed acceptance recipe")
    s.add_argument("recipe")
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        args.threads = resolve_threads(args.threads)
        rc = load_run_config(args.config, parse_overrides(extra), args.seed)
        result = args.func(args, rc)
    except (SegRecipesError, OSError, ValueError, KeyError) as exc:
        kind = getattr(exc, "kind", type(exc).__name__)
        sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
