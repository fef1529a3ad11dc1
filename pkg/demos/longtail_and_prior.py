# A walk through the long-tailed data and the prior-adjusted cosine head.
# Run: python demos/longtail_and_prior.py   (about 10 s)

import numpy as np

from segrecipes.datagen import DatasetConfig, compute_prior, generate
from segrecipes.metrics import subset_miou
from segrecipes.trainer import TrainConfig, evaluate, train

# %% Data: Voronoi cells per video, classes drawn from a Zipf law
cfg = DatasetConfig(num_classes=20, zipf_exponent=2.0, frame_jitter=1.0, num_videos=200,
                    cells_per_video=16, split_fractions=(0.4, 0.6, 0.0), seed=3)
ds = generate(cfg)
prior = compute_prior(ds)
print("train pixels per class:", prior.pixel_counts)
print("videos containing class:", prior.video_counts)
print("head/tail pixel ratio: %.0f" % (prior.pixel_counts.max() / prior.pixel_counts[15:].mean()))

# %% Priors enter the training logits as tau * log(pi); rare classes get a negative offset
print("tau * log(pi):", np.round(0.03 * np.log(prior.pi), 3))

# %% Same budget, two objectives
base = dict(total_iters=600, swa_extra_iters=0, snapshot_interval=100, cycle_length=100, seed=3)
frames = ds.frames("val")
for kind, extra in (("ce", {}), ("la_ce", {"cosine_scale": 15.0})):
    result = train(TrainConfig(loss_kind=kind, **base, **extra), ds, prior=prior)
    rep = evaluate(result.final.params, frames, cfg.num_classes)
    print(f"{kind:6s} mIoU {rep.miou:.3f}  tail-5 mIoU {subset_miou(rep, range(15, 20)) or 0:.3f}")
