# Self-distillation as a regulariser on a deliberately overfit setup.
# Run: python demos/self_distillation.py   (about 10 s)

from segrecipes.datagen import DatasetConfig, generate
from segrecipes.losses import distill_kl
from segrecipes.model import forward
from segrecipes.trainer import DistillConfig, TrainConfig, mean_ce, stack_frames, train

# A small train split and a wide hidden layer make the gap easy to see
ds = generate(DatasetConfig(num_classes=10, num_videos=60, zipf_exponent=1.0, frame_jitter=0.8,
                            video_offset=0.6, split_fractions=(0.1, 0.9, 0.0), seed=2))
base = dict(total_iters=1000, swa_extra_iters=0, snapshot_interval=100, cycle_length=100,
            base_lr=0.05, hidden_dim=64)

# %% The teacher is an early-stopped model of the same architecture
teacher = train(TrainConfig(seed=1002, **{**base, "total_iters": 100}), ds).final
x, _ = stack_frames(ds.frames("train"))
logits = forward(teacher.params, x)
print("KL(teacher, teacher) =", distill_kl(logits, logits).value)

# %% Train the student twice: without and with the KL term
for lam in (0.0, 1.0):
    student = train(TrainConfig(seed=2, distill=DistillConfig(teacher, lam=lam), **base), ds).final
    tr, va = mean_ce(student.params, ds.frames("train")), mean_ce(student.params, ds.frames("val"))
    print(f"lambda={lam}: train CE {tr:.3f}  val CE {va:.3f}  gap {va - tr:.3f}")
