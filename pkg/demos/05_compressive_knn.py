"""Measurement-space quality probe: K-nearest-neighbour accuracy computed on
the compressed measurements, before and after training the sensing factors.

Run:  python3 demos/05_compressive_knn.py
"""

from mclkit import (
    TrainConfig,
    accuracy,
    build_mcl,
    hosvd_init,
    knn_compressive,
    synth_dataset,
    train_mcl_baseline,
)

# Four measurements from 256 pixels at heavy noise: hard enough that the
# choice of sensing factors visibly moves the neighbourhood structure.
SIGNAL, MEAS, CLASSES = (16, 16, 1), (2, 2, 1), 4

bundle = synth_dataset(0, SIGNAL, CLASSES, n_per_class=100, noise=0.3)
model = build_mcl(SIGNAL, MEAS, CLASSES, fs_kind="multilinear", width=12, seed=0)

for k in (1, 5, 20):
    acc = knn_compressive(model, bundle.train_x, bundle.train_y,
                          bundle.test_x, bundle.test_y, k=k)
    print(f"random sensing factors,   k={k:2d}: knn accuracy {acc:.3f}")

hosvd_init(model, bundle.train_x)
for k in (1, 5, 20):
    acc = knn_compressive(model, bundle.train_x, bundle.train_y,
                          bundle.test_x, bundle.test_y, k=k)
    print(f"energy-preserving init,   k={k:2d}: knn accuracy {acc:.3f}")

cfg = TrainConfig(epochs=20, lr_switch_epochs=(12, 16), batch_size=32, seed=0)
train_mcl_baseline(model, bundle, cfg)
for k in (1, 5, 20):
    acc = knn_compressive(model, bundle.train_x, bundle.train_y,
                          bundle.test_x, bundle.test_y, k=k)
    print(f"after end-to-end training, k={k:2d}: knn accuracy {acc:.3f}")
print(f"classifier test accuracy: {accuracy(model, bundle.test_x, bundle.test_y):.3f}")
