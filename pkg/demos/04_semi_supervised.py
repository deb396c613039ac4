"""Self-labeling walkthrough: a teacher trained on 20% labels absorbs the
unlabeled pool round by round, then guides the student with predicted labels.

Run:  python3 demos/04_semi_supervised.py
"""

from mclkit import (
    StageMask,
    TrainConfig,
    accuracy,
    build_mcl,
    build_prior,
    split_semisup,
    synth_dataset,
    train_mclwp_semisup,
    train_prior_semisup,
)

SIGNAL, MEAS, CLASSES = (8, 8, 1), (3, 3, 1), 3

full = synth_dataset(0, SIGNAL, CLASSES, n_per_class=60, noise=0.05)
semi = split_semisup(full, labeled_fraction=0.2, seed=1)
print(f"labeled {len(semi.train_x)}, unlabeled pool {semi.n_unlabeled}")

cfg = TrainConfig(epochs=20, lr_switch_epochs=(12, 16), batch_size=16, seed=0,
                  confidence_threshold=0.7, epochs_per_round=40)
teacher = build_prior(SIGNAL, MEAS, CLASSES, width=8, seed=0)
result = train_prior_semisup(teacher, semi, cfg)

print("\nself-labeling rounds (confidence threshold "
      f"{cfg.confidence_threshold}):")
for r in result.info["rounds"]:
    print(f"  round {r['round']}: labeled {r['labeled']:3d}  "
          f"pool {r['pool']:3d}  newly confident {r['added']:3d}")
print(f"teacher test accuracy: {accuracy(teacher, full.test_x, full.test_y):.3f}")

student = build_mcl(SIGNAL, MEAS, CLASSES, fs_kind="nonlinear", width=8, seed=0)
train_mclwp_semisup(student, teacher, semi, cfg, StageMask())
print(f"student test accuracy (teacher labels on the pool): "
      f"{accuracy(student, full.test_x, full.test_y):.3f}")
