# Snapshot averaging over a cyclic-LR tail, then a three-group ensemble.
# Run: python demos/swa_and_ensemble.py   (about 15 s)

import numpy as np

from segrecipes.datagen import DatasetConfig, generate
from segrecipes.ensemble import GroupSpec, grid_search, group_average, predict_map
from segrecipes.swa import average_checkpoints
from segrecipes.trainer import TrainConfig, cyclic_lr, evaluate, lr_at, train

# %% The schedule: flat base phase, then one cosine cycle per snapshot
cfg = TrainConfig(total_iters=500, swa_extra_iters=500, snapshot_interval=100, cycle_length=100,
                  base_lr=0.1, lr_max=0.2, lr_min=0.005)
print("lr around the switch:", [round(lr_at(i, cfg), 4) for i in (499, 500, 501, 550, 599)])

ds = generate(DatasetConfig(num_classes=12, num_videos=80, frame_jitter=0.8,
                            split_fractions=(0.5, 0.5, 0.0), seed=1))
val = ds.frames("val")

# %% Train three members with different seeds and losses
members = {}
for name, kind, seed in (("s0", "ce", 0), ("s1", "ce", 1), ("w0", "ce_ohem", 2), ("a0", "la_ce", 3)):
    run = train(TrainConfig(**{**cfg.to_dict(), "loss_kind": kind, "seed": seed,
                               "cosine_scale": 15.0 if kind == "la_ce" else 1.0}), ds)
    avg = average_checkpoints(run.snapshots)
    last, swa = (evaluate(c.params, val, 12).miou for c in (run.snapshots[-1], avg))
    print(f"{name} ({kind}): last snapshot {last:.3f}  SWA of {len(run.snapshots)} {swa:.3f}")
    members[name] = avg

# %% Average within groups, then search the fusion weights on val
groups = GroupSpec(strong=["s0", "s1"], weak=["w0"], aux=["a0"])
ids = ds.frame_ids("val")


def group_maps(names):
    return [group_average([predict_map(members[n], f.features, fid, n) for n in names])
            for fid, f in zip(ids, val)]


res = grid_search(group_maps(groups.strong), group_maps(groups.weak), group_maps(groups.aux),
                  [f.labels for f in val], 12)
print("best alpha, beta:", res.weights.alpha, res.weights.beta, " mIoU %.3f" % res.miou)
print("strong group alone: %.3f" % res.table[0, 0])
