"""Dataset container, binary on-disk format, semi-supervised splitting, and a
synthetic low-rank generator for fast end-to-end runs.

One ``.mcld`` file holds one split.  Layout (little-endian u32 integers):

    magic b"MCLD" | version | count | rank | dims[rank] | n_classes |
    per sample: float32 payload (prod(dims) values) + u32 label

The label sentinel ``0xFFFFFFFF`` marks an unlabeled sample.  A dataset
directory holds ``train.mcld`` and ``test.mcld`` plus an optional
``val.mcld``; unlabeled training samples ride inside ``train.mcld`` via the
sentinel.  Pixel payloads are stored already scaled to [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor
from .errors import (
    ConfigError,
    DatasetFormatError,
    DatasetLabelError,
    DatasetTruncatedError,
)

__all__ = [
    "DatasetBundle",
    "read_split",
    "write_split",
    "load_dataset",
    "save_dataset",
    "split_semisup",
    "synth_dataset",
    "nearest_template_accuracy",
]

MAGIC = b"MCLD"
VERSION = 1
UNLABELED = 0xFFFFFFFF


@dataclass
class DatasetBundle:
    """Train/validation/test splits plus an optional unlabeled pool."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    unlabeled_x: np.ndarray | None = None

    def __post_init__(self):
        shape = self.signal_shape
        for name in ("train", "val", "test"):
            x = getattr(self, f"{name}_x")
            y = getattr(self, f"{name}_y")
            if x.shape[1:] != shape:
                raise ConfigError(f"{name} samples of shape {x.shape[1:]} != {shape}")
            if len(x) != len(y):
                raise ConfigError(f"{name}: {len(x)} samples but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise DatasetLabelError(
                    f"{name} labels outside [0, {self.n_classes})"
                )
        if self.unlabeled_x is not None and self.unlabeled_x.shape[1:] != shape:
            raise ConfigError("unlabeled samples do not match the signal shape")

    @property
    def signal_shape(self) -> tuple:
        return self.train_x.shape[1:]

    @property
    def n_unlabeled(self) -> int:
        return 0 if self.unlabeled_x is None else len(self.unlabeled_x)


def write_split(path, x, y=None) -> None:
    """Write one sample collection; ``y=None`` or a -1 entry marks unlabeled."""
    x = np.ascontiguousarray(np.asarray(x), dtype="<f4")
    n = len(x)
    if y is None:
        labels = np.full(n, UNLABELED, dtype=np.uint64)
        n_classes = 0
    else:
        y = np.asarray(y)
        labels = np.where(y < 0, UNLABELED, y).astype(np.uint64)
        real = y[y >= 0]
        n_classes = int(real.max()) + 1 if real.size else 0
    return _write_split(path, x, labels, n_classes)


def _write_split(path, x, labels, n_classes) -> None:
    dims = x.shape[1:]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(x), len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", n_classes))
        for sample, label in zip(x, labels):
            fh.write(sample.tobytes())
            fh.write(struct.pack("<I", int(label)))


def read_split(path):
    """Read one split: ``(x, y, n_classes)``; unlabeled rows get label -1."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DatasetTruncatedError(
                f"{path}: file ends at byte {len(data)}, needed {pos + n}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes; not a dataset file")
    version, count, rank = struct.unpack("<III", take(12))
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    if rank > 8:
        raise DatasetFormatError(f"{path}: implausible sample rank {rank}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    (n_classes,) = struct.unpack("<I", take(4))
    size = int(np.prod(dims))
    x = np.empty((count,) + dims, dtype=np.float32)
    y = np.empty(count, dtype=np.int64)
    for i in range(count):
        x[i] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        (label,) = struct.unpack("<I", take(4))
        if label == UNLABELED:
            y[i] = -1
        elif label >= n_classes:
            raise DatasetLabelError(
                f"{path}: sample {i} has label {label} but only "
                f"{n_classes} classes are declared"
            )
        else:
            y[i] = label
    if pos != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - pos} trailing bytes")
    if not np.isfinite(x).all():
        raise DatasetFormatError(f"{path}: payload contains non-finite values")
    return x, y, n_classes


def save_dataset(bundle: DatasetBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train_x, train_y = bundle.train_x, bundle.train_y
    if bundle.unlabeled_x is not None and len(bundle.unlabeled_x):
        train_x = np.concatenate([train_x, bundle.unlabeled_x])
        train_y = np.concatenate(
            [train_y, np.full(len(bundle.unlabeled_x), -1, dtype=np.int64)]
        )
    _write_split(
        directory / "train.mcld",
        np.ascontiguousarray(train_x, dtype="<f4"),
        np.where(train_y < 0, UNLABELED, train_y).astype(np.uint64),
        bundle.n_classes,
    )
    write_split(directory / "val.mcld", bundle.val_x, bundle.val_y)
    write_split(directory / "test.mcld", bundle.test_x, bundle.test_y)


def load_dataset(directory) -> DatasetBundle:
    """Load a dataset directory (train/val/test splits, pooled unlabeled rows).

    A missing ``val.mcld`` is carved from the tail of each class's training
    samples (about 10%, at least one per class, fixed rule).
    """
    directory = Path(directory)
    train_path = directory / "train.mcld"
    test_path = directory / "test.mcld"
    if not train_path.exists() or not test_path.exists():
        raise DatasetFormatError(
            f"{directory}: expected train.mcld and test.mcld"
        )
    train_x, train_y, n_classes = read_split(train_path)
    test_x, test_y, test_classes = read_split(test_path)
    n_classes = max(n_classes, test_classes)
    unlabeled = train_y < 0
    unlabeled_x = train_x[unlabeled] if unlabeled.any() else None
    train_x, train_y = train_x[~unlabeled], train_y[~unlabeled]
    val_path = directory / "val.mcld"
    if val_path.exists():
        val_x, val_y, _ = read_split(val_path)
        if (val_y < 0).any():
            raise DatasetLabelError(f"{val_path}: validation rows must be labeled")
    else:
        val_idx = []
        for c in range(n_classes):
            members = np.flatnonzero(train_y == c)
            take_n = max(1, len(members) // 10)
            val_idx.extend(members[-take_n:])
        val_idx = np.asarray(sorted(val_idx))
        keep = np.ones(len(train_x), dtype=bool)
        keep[val_idx] = False
        val_x, val_y = train_x[val_idx], train_y[val_idx]
        train_x, train_y = train_x[keep], train_y[keep]
    if (test_y < 0).any():
        raise DatasetLabelError(f"{test_path}: test rows must be labeled")
    return DatasetBundle(train_x, train_y, val_x, val_y, test_x, test_y,
                         n_classes, unlabeled_x)


def split_semisup(bundle: DatasetBundle, labeled_fraction: float, seed: int) -> DatasetBundle:
    """Withhold labels from a stratified share of the training split.

    The labeled set keeps ``round(fraction * n_train)`` samples apportioned
    per class by largest remainder (so proportions stay within one sample);
    the rest move to the unlabeled pool with labels dropped.
    """
    if not 0 < labeled_fraction <= 1:
        raise ConfigError("labeled_fraction must lie in (0, 1]")
    n = len(bundle.train_x)
    total = int(round(labeled_fraction * n))
    rng = np.random.default_rng(seed)
    class_members = [np.flatnonzero(bundle.train_y == c) for c in range(bundle.n_classes)]
    exact = [labeled_fraction * len(m) for m in class_members]
    counts = [int(f) for f in exact]
    remainders = sorted(
        range(bundle.n_classes), key=lambda c: (-(exact[c] - counts[c]), c)
    )
    for c in remainders:
        if sum(counts) >= total:
            break
        if counts[c] < len(class_members[c]):
            counts[c] += 1
    if any(c == 0 for c in counts):
        raise ConfigError(
            f"labeled_fraction {labeled_fraction} leaves a class with no labels"
        )
    labeled_idx = []
    for members, take_n in zip(class_members, counts):
        members = members[rng.permutation(len(members))]
        labeled_idx.extend(members[:take_n])
    labeled_idx = np.asarray(sorted(labeled_idx))
    keep = np.zeros(n, dtype=bool)
    keep[labeled_idx] = True
    return replace(
        bundle,
        train_x=bundle.train_x[keep],
        train_y=bundle.train_y[keep],
        unlabeled_x=bundle.train_x[~keep].copy(),
    )


def nearest_template_accuracy(x, y, templates) -> float:
    """Fraction of samples closest (Euclidean) to their own class template."""
    flat = x.reshape(len(x), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1).astype(np.float64)
    d = ((flat[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == y))


def _low_rank_template(rng, shape):
    h, w, c = shape
    a = rng.normal(size=(h, 2))
    b = rng.normal(size=(w, 2))
    ch = rng.normal(size=(c, 1))
    core = rng.normal(size=(2, 2, 1))
    t = tensor.multi_mode_product(core, [a, b, ch])
    lo, hi = t.min(), t.max()
    return 0.15 + 0.7 * (t - lo) / (hi - lo)


def synth_dataset(seed, shape=(16, 16, 1), classes=4, n_per_class=200,
                  noise=0.05, val_per_class=None, test_per_class=None) -> DatasetBundle:
    """Deterministic synthetic classification data.

    Each class is a distinct low-rank template (multilinear rank (2, 2, 1))
    plus Gaussian noise, clipped to [0, 1].  For noise up to 0.1 the draw is
    verified at generation: a nearest-template scan must be at least 99%
    accurate, otherwise the templates are redrawn (deterministically).
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape) or len(shape) != 3:
        raise ConfigError(f"degenerate sample shape {shape}")
    if val_per_class is None:
        val_per_class = max(2, n_per_class // 4)
    if test_per_class is None:
        test_per_class = max(2, n_per_class // 4)
    per_class = n_per_class + val_per_class + test_per_class
    for attempt in range(5):
        rng = np.random.default_rng(seed + 1_000_003 * attempt)
        templates = np.stack([_low_rank_template(rng, shape) for _ in range(classes)])
        x = np.empty((classes * per_class,) + shape, dtype=np.float32)
        y = np.empty(classes * per_class, dtype=np.int64)
        for c in range(classes):
            block = slice(c * per_class, (c + 1) * per_class)
            noisy = templates[c][None] + noise * rng.normal(size=(per_class,) + shape)
            x[block] = np.clip(noisy, 0.0, 1.0).astype(np.float32)
            y[block] = c
        if noise > 0.1 or nearest_template_accuracy(x, y, templates) >= 0.99:
            break
    else:
        raise ConfigError(
            f"could not draw separable templates for shape {shape} at noise {noise}"
        )
    train_idx, val_idx, test_idx = [], [], []
    for c in range(classes):
        base = c * per_class
        train_idx.extend(range(base, base + n_per_class))
        val_idx.extend(range(base + n_per_class, base + n_per_class + val_per_class))
        test_idx.extend(range(base + n_per_class + val_per_class, base + per_class))
    train_idx = np.asarray(train_idx)[rng.permutation(len(train_idx))]
    bundle = DatasetBundle(
        train_x=x[train_idx],
        train_y=y[train_idx],
        val_x=x[np.asarray(val_idx)],
        val_y=y[np.asarray(val_idx)],
        test_x=x[np.asarray(test_idx)],
        test_y=y[np.asarray(test_idx)],
        n_classes=classes,
    )
    bundle.templates = templates  # kept for oracle checks
    return bundle
