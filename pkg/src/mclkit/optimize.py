"""Stochastic training engine: Adam, staged learning-rate schedule, max-norm
projection, data augmentation, and an epoch loop with validation-based model
selection.

Everything here is deterministic for a fixed config and seed: shuffling and
augmentation draw from one seeded generator in a fixed order, and batch
gradients are accumulated in a fixed reduction order.
"""

from __future__ import annotations

import bisect
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .layers import LayerStack
from .losses import cross_entropy, l1_loss, symmetric_kl

__all__ = [
    "TrainConfig",
    "AdamState",
    "max_norm_project",
    "augment",
    "shift2d",
    "TrainHistory",
    "Objective",
    "SupervisedObjective",
    "ReconstructionObjective",
    "OutputMatchingObjective",
    "DistillationObjective",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one stochastic optimization procedure.

    The default schedule is a desk-scale compression of the full-length one
    (:meth:`full_schedule`) so test runs finish in minutes.
    """

    epochs: int = 60
    lr_values: tuple = (1e-3, 1e-4, 1e-5)
    lr_switch_epochs: tuple = (30, 45)
    batch_size: int = 32
    max_norm: float = 6.0
    flip: bool = False
    shift_fraction: float = 0.0
    seed: int = 0
    distill_weight: float = 1.0
    confidence_threshold: float = 0.8
    epochs_per_round: int = 5
    self_label_round_cap: int = 50

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.lr_values) != len(self.lr_switch_epochs) + 1:
            raise ConfigError("need one more lr value than switch epochs")
        switches = tuple(self.lr_switch_epochs)
        if any(b <= a for a, b in zip(switches, switches[1:])):
            raise ConfigError("lr switch epochs must be strictly increasing")
        if switches and (switches[0] < 1 or switches[-1] >= self.epochs):
            raise ConfigError("lr switch epochs must lie inside (0, epochs)")
        if self.max_norm <= 0:
            raise ConfigError("max_norm must be positive")
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be >= 0")
        if not 0 < self.confidence_threshold < 1:
            raise ConfigError("confidence_threshold must lie in (0, 1)")
        if self.epochs_per_round < 1:
            raise ConfigError("epochs_per_round must be >= 1")
        if not 0 <= self.shift_fraction < 1:
            raise ConfigError("shift_fraction must lie in [0, 1)")

    @classmethod
    def full_schedule(cls, **overrides) -> "TrainConfig":
        """Full-length schedule: 160 epochs, lr 1e-3/1e-4/1e-5 switching at
        epochs 80 and 120, max-norm 6.0, flip + 10% shift augmentation."""
        base = dict(
            epochs=160,
            lr_values=(1e-3, 1e-4, 1e-5),
            lr_switch_epochs=(80, 120),
            max_norm=6.0,
            flip=True,
            shift_fraction=0.1,
            distill_weight=1.0,
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        return self.lr_values[bisect.bisect_right(self.lr_switch_epochs, epoch)]

    def with_epochs(self, epochs: int, seed=None) -> "TrainConfig":
        """Shorten the run, dropping schedule switches that no longer fit."""
        switches = tuple(e for e in self.lr_switch_epochs if e < epochs)
        values = tuple(self.lr_values[: len(switches) + 1])
        kw = dict(epochs=epochs, lr_switch_epochs=switches, lr_values=values)
        if seed is not None:
            kw["seed"] = seed
        return replace(self, **kw)


class AdamState:
    """Bias-corrected Adam moments for a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def max_norm_project(params, c: float) -> None:
    """Rescale each constrained weight vector whose l2 norm exceeds ``c``.

    Parameters without ``norm_axes`` (biases) are exempt; parameters whose
    vectors are all within the bound are left bit-identical.
    """
    if c <= 0:
        raise ConfigError("max-norm bound must be positive")
    for p in params:
        if p.norm_axes is None:
            continue
        v = p.value
        norms = np.sqrt(np.sum(v * v, axis=p.norm_axes, keepdims=True))
        over = norms > c
        if over.any():
            scale = np.where(over, c / np.maximum(norms, 1e-30), 1.0)
            v *= scale.astype(v.dtype)


def shift2d(img, dy: int, dx: int):
    """Shift one (H, W, C) image by whole pixels, filling borders with zeros."""
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h - max(dy, 0))
    xs_src = slice(max(-dx, 0), w - max(dx, 0))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def augment(batch, flip: bool, shift_fraction: float, rng):
    """Per-sample horizontal flip (p=0.5) and integer shifts within the given
    fraction of each spatial dimension. Labels are the caller's business."""
    if not flip and shift_fraction <= 0:
        return batch
    out = batch.copy()
    b, h, w = batch.shape[:3]
    if flip:
        flips = rng.random(b) < 0.5
        for i in np.flatnonzero(flips):
            out[i] = batch[i, :, ::-1, :]
    if shift_fraction > 0:
        sy = int(shift_fraction * h)
        sx = int(shift_fraction * w)
        dys = rng.integers(-sy, sy + 1, size=b) if sy > 0 else np.zeros(b, dtype=int)
        dxs = rng.integers(-sx, sx + 1, size=b) if sx > 0 else np.zeros(b, dtype=int)
        for i in range(b):
            if dys[i] or dxs[i]:
                out[i] = shift2d(out[i], int(dys[i]), int(dxs[i]))
    return out


@dataclass
class TrainHistory:
    """Per-epoch log of one optimization procedure."""

    rows: list = field(default_factory=list)  # (epoch, lr, train_loss, val_metric)
    best_epoch: int = -1
    best_value: float = math.nan
    higher_is_better: bool = True
    n_train: int = 0
    seconds: float = 0.0

    def lr_sequence(self):
        return [r[1] for r in self.rows]

    def train_losses(self):
        return [r[2] for r in self.rows]

    def val_metrics(self):
        return [r[3] for r in self.rows]

    def csv_text(self) -> str:
        lines = ["epoch,lr,train_loss,val_metric"]
        for epoch, lr, loss, val in self.rows:
            lines.append(f"{epoch},{lr:g},{loss!r},{val!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def _forward_path(stacks, x, training=False):
    for s in stacks:
        x = s.forward(x, training=training)
    return x


def _backward_path(stacks, grad):
    for s in reversed(stacks):
        grad = s.backward(grad)
    return grad


def _forward_chunks(stacks, x, chunk=256):
    outs = [_forward_path(stacks, x[i : i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def _path_accuracy(stacks, x, y, chunk=256):
    logits = _forward_chunks(stacks, x, chunk)
    return float(np.mean(logits.argmax(axis=1) == y))


def _ce_step(stacks, x, y) -> float:
    # Shared by supervised training and zero-weight distillation so the two
    # produce bit-identical loss traces.
    logits = _forward_path(stacks, x, training=True)
    loss, grad = cross_entropy(logits, y)
    _backward_path(stacks, grad)
    return loss


class Objective:
    """One trainable optimization target: batch loss/gradients plus a
    validation score used for model selection."""

    higher_is_better = True
    trainable: tuple[LayerStack, ...] = ()

    def batch_loss(self, x, y) -> float:
        raise NotImplementedError

    def val_metric(self, x, y) -> float:
        raise NotImplementedError


class SupervisedObjective(Objective):
    """Cross-entropy over a stack pipeline; selects on validation accuracy."""

    def __init__(self, path):
        self.path = tuple(path)
        self.trainable = self.path

    def batch_loss(self, x, y):
        return _ce_step(self.path, x, y)

    def val_metric(self, x, y):
        return _path_accuracy(self.path, x, y)


class ReconstructionObjective(Objective):
    """Mean-absolute reconstruction of the input through encoder + decoder;
    selects on lowest validation loss."""

    higher_is_better = False

    def __init__(self, path):
        self.path = tuple(path)
        self.trainable = self.path

    def batch_loss(self, x, y):
        out = _forward_path(self.path, x, training=True)
        loss, grad, _ = l1_loss(out, x)
        _backward_path(self.path, grad)
        return loss

    def val_metric(self, x, y):
        out = _forward_chunks(self.path, x)
        return l1_loss(out, x)[0]


class OutputMatchingObjective(Objective):
    """Mean-absolute gap between a trainable pipeline and a frozen reference
    pipeline evaluated on the same inputs; selects on lowest validation gap."""

    higher_is_better = False

    def __init__(self, student_path, teacher_path):
        self.student_path = tuple(student_path)
        self.teacher_path = tuple(teacher_path)
        self.trainable = self.student_path

    def _target(self, x):
        return _forward_path(self.teacher_path, x, training=False)

    def batch_loss(self, x, y):
        out = _forward_path(self.student_path, x, training=True)
        loss, grad, _ = l1_loss(out, self._target(x))
        _backward_path(self.student_path, grad)
        return loss

    def val_metric(self, x, y):
        out = _forward_chunks(self.student_path, x)
        target = _forward_chunks(self.teacher_path, x)
        return l1_loss(out, target)[0]


class DistillationObjective(Objective):
    """Cross-entropy plus weighted symmetric KL against a frozen teacher's
    predictions; with weight 0 this is exactly supervised training."""

    def __init__(self, student_path, teacher_path, weight):
        self.student_path = tuple(student_path)
        self.teacher_path = tuple(teacher_path)
        self.weight = float(weight)
        self.trainable = self.student_path

    def batch_loss(self, x, y):
        if self.weight == 0.0:
            return _ce_step(self.student_path, x, y)
        logits = _forward_path(self.student_path, x, training=True)
        ce, g_ce = cross_entropy(logits, y)
        teacher_logits = _forward_path(self.teacher_path, x, training=False)
        kl, _, g_kl = symmetric_kl(teacher_logits, logits)
        _backward_path(self.student_path, g_ce + self.weight * g_kl)
        return ce + self.weight * kl

    def val_metric(self, x, y):
        return _path_accuracy(self.student_path, x, y)


def train(objective: Objective, train_x, train_y, val_x, val_y, cfg: TrainConfig,
          epoch_end=None) -> TrainHistory:
    """Run the epoch loop and leave the trainable stacks holding the
    parameters of the best validation epoch.

    Ties keep the earliest best epoch, so the selected metric equals the
    extremum of the recorded history exactly.  ``epoch_end(epoch, objective)``
    is an optional hook called after each epoch's validation pass.
    """
    n = len(train_x)
    if n == 0:
        raise ConfigError("training data is empty")
    rng = np.random.default_rng(cfg.seed)
    params = [p for s in objective.trainable for p in s.params]
    adam = AdamState(params)
    hib = objective.higher_is_better
    history = TrainHistory(higher_is_better=hib, n_train=n)
    best_snapshot = None
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_x[idx]
            yb = train_y[idx] if train_y is not None else None
            xb = augment(xb, cfg.flip, cfg.shift_fraction, rng)
            for s in objective.trainable:
                s.zero_grads()
            loss = objective.batch_loss(xb, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                    f" (lr={lr:g}); param norms: "
                    + ", ".join(
                        f"{p.name}={float(np.linalg.norm(p.value)):.3g}" for p in params[:8]
                    )
                )
            adam.step(lr)
            max_norm_project(params, cfg.max_norm)
            batch_losses.append(loss)
        train_loss = sum(batch_losses) / len(batch_losses)
        val = objective.val_metric(val_x, val_y)
        history.rows.append((epoch, lr, train_loss, val))
        better = (
            best_snapshot is None
            or (val > history.best_value if hib else val < history.best_value)
        )
        if better:
            history.best_value = val
            history.best_epoch = epoch
            best_snapshot = [p.value.copy() for p in params]
        if epoch_end is not None:
            epoch_end(epoch, objective)
    for p, snap in zip(params, best_snapshot):
        p.value[...] = snap
    history.seconds = time.perf_counter() - started
    return history
