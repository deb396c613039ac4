"""Supervised pipeline at desk scale: train the nonlinear teacher, transfer
its knowledge to the multilinear student in three stages, and compare with
the two no-teacher baselines.

Takes a few minutes.  Run:  python3 demos/03_supervised_transfer.py
"""

import time

from mclkit import (
    StageMask,
    TrainConfig,
    accuracy,
    build_mcl,
    build_prior,
    synth_dataset,
    train_mcl_baseline,
    train_mclwop,
    train_mclwp,
    train_prior_supervised,
)

SIGNAL, MEAS, CLASSES, WIDTH = (16, 16, 1), (4, 4, 1), 4, 12

bundle = synth_dataset(0, SIGNAL, CLASSES, n_per_class=200, noise=0.05)
cfg = TrainConfig(epochs=25, lr_switch_epochs=(15, 20), batch_size=32, seed=0)
print(f"dataset: {len(bundle.train_x)} train / {len(bundle.val_x)} val / "
      f"{len(bundle.test_x)} test, measurement {MEAS} "
      f"(rate {16 / 256:.3f})")

started = time.time()
teacher = build_prior(SIGNAL, MEAS, CLASSES, width=WIDTH, seed=0)
result = train_prior_supervised(teacher, bundle, cfg)
print(f"\nteacher trained in {time.time() - started:.0f}s; "
      f"test accuracy {accuracy(teacher, bundle.test_x, bundle.test_y):.3f}")
for name, h in result.stages.items():
    print(f"  {name:16s} best val {h.best_value:.4f} at epoch {h.best_epoch}")

started = time.time()
student = build_mcl(SIGNAL, MEAS, CLASSES, fs_kind="nonlinear", width=WIDTH, seed=0)
train_mclwp(student, teacher, bundle, cfg, StageMask())
print(f"\nteacher-guided student trained in {time.time() - started:.0f}s; "
      f"test accuracy {accuracy(student, bundle.test_x, bundle.test_y):.3f}")

started = time.time()
control = build_mcl(SIGNAL, MEAS, CLASSES, fs_kind="nonlinear", width=WIDTH, seed=0)
train_mclwop(control, bundle, cfg)
print(f"same architecture without a teacher: "
      f"test accuracy {accuracy(control, bundle.test_x, bundle.test_y):.3f} "
      f"({time.time() - started:.0f}s)")

started = time.time()
baseline = build_mcl(SIGNAL, MEAS, CLASSES, fs_kind="multilinear", width=WIDTH, seed=0)
train_mcl_baseline(baseline, bundle, cfg)
print(f"fully multilinear baseline: "
      f"test accuracy {accuracy(baseline, bundle.test_x, bundle.test_y):.3f} "
      f"({time.time() - started:.0f}s)")
