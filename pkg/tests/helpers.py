import numpy as np

from segrecipes.datagen import Dataset, DatasetConfig, Frame, Video


def hand_dataset(videos, num_classes, feature_dim=2, seed=0):
    """Dataset from nested lists of label grids; features are zeros.

    Every video goes into the train split.
    """
    grids = [[np.asarray(g, dtype=np.uint8) for g in v] for v in videos]
    h, w = grids[0][0].shape
    cfg = DatasetConfig(num_classes=num_classes, feature_dim=feature_dim, num_videos=len(grids),
                        frames_per_video=len(grids[0]), height=h, width=w, seed=seed)
    vids = [Video(i, [Frame(np.zeros((h, w, feature_dim)), g) for g in v]) for i, v in enumerate(grids)]
    return Dataset(cfg, vids, {"train": list(range(len(vids))), "val": [], "test": []})


PIPELINE_CONFIG = {
    "data": {"num_classes": 5, "feature_dim": 3, "num_videos": 8, "frames_per_video": 2,
             "height": 6, "width": 6, "zipf_exponent": 1.5, "seed": 0},
    "train": {"total_iters": 20, "swa_extra_iters": 20, "snapshot_interval": 10, "cycle_length": 10,
              "base_lr": 0.1, "lr_max": 0.1, "lr_min": 0.01, "batch_frames": 2, "hidden_dim": 8},
    "fusion": {"alpha_grid": [0.0, 1.0, 2.0], "beta_grid": [0.0, 1.0, 2.0]},
}


def run_pipeline(root, config=PIPELINE_CONFIG, threads=1):
    """gen-data -> train x3 -> swa -> predict -> ensemble-search -> eval under ``root``.

    Returns the list of artifact paths relative to ``root``.
    """
    import json
    from pathlib import Path

    from segrecipes.cli import main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    (root / "groups.json").write_text(json.dumps({"strong": ["a"], "weak": ["b"], "aux": ["c"]}))
    t = ["--threads", str(threads)]

    def run(*args):
        assert main([str(a) for a in args] + ["--config", str(cfg)] + t) == 0, args

    run("gen-data", "--out", root / "data.sseg")
    run("priors", root / "data.sseg", "--out", root / "prior.json")
    run("train", root / "data.sseg", "--out", root / "run_a")
    run("train", root / "data.sseg", "--out", root / "run_b", "--train.loss_kind", "la_ce", "--seed", "1")
    run("train", root / "data.sseg", "--out", root / "run_c", "--train.loss_kind", "ce_ohem", "--seed", "2")
    run("swa", root / "run_a" / "snapshots", "--out", root / "swa_a.swck")
    run("predict", root / "swa_a.swck", root / "data.sseg", "--model-id", "a", "--out", root / "pm" / "a")
    run("predict", root / "run_b" / "final.swck", root / "data.sseg", "--model-id", "b", "--tta",
        "--out", root / "pm" / "b")
    run("predict", root / "run_c" / "final.swck", root / "data.sseg", "--model-id", "c", "--out", root / "pm" / "c")
    run("ensemble-search", root / "groups.json", "--pmaps", root / "pm" / "a", root / "pm" / "b", root / "pm" / "c",
        "--dataset", root / "data.sseg", "--out", root / "fusion.json")
    run("eval", root / "data.sseg", "--pmaps", root / "pm" / "a", "--out", root / "eval.json")
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())
