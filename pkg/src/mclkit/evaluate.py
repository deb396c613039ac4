"""Metrics and experiment harnesses: test accuracy, compressive-domain KNN,
the stage-ablation grid, and the with/without-teacher comparison.

Report CSVs share one schema:

    run_id,mask_s1,mask_s2,mask_s3,config,seed,metric,value

All harnesses are deterministic for fixed seeds, so repeated invocations
produce byte-identical CSV text.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .datasets import DatasetBundle
from .distill import (
    StageMask,
    train_mclwop,
    train_mclwp,
    train_prior_supervised,
)
from .errors import ConfigError
from .models import build_mcl, build_prior
from .optimize import TrainConfig, _forward_chunks

__all__ = [
    "EvalReport",
    "accuracy",
    "knn_compressive",
    "run_ablation",
    "compare_prior_effect",
    "AblationReport",
    "PriorEffectReport",
]

CSV_HEADER = "run_id,mask_s1,mask_s2,mask_s3,config,seed,metric,value"


@dataclass(frozen=True)
class EvalReport:
    """One evaluated number with enough context to be replayed."""

    model_id: str
    config: str
    metric: str
    value: float
    seed: int
    runtime: float = 0.0

    def __post_init__(self):
        if "accuracy" in self.metric and not 0 <= self.value <= 1:
            raise ConfigError(f"accuracy {self.value} outside [0, 1]")


def _rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['run_id']},{r['mask_s1']},{r['mask_s2']},{r['mask_s3']},"
            f"{r['config']},{r['seed']},{r['metric']},{r['value']!r}"
        )
    return "\n".join(lines) + "\n"


def _predicted_classes(model, x, chunk=256):
    logits = _forward_chunks(
        [model.sensing, model.synthesis, model.head], x, chunk=chunk
    )
    return logits.argmax(axis=1)


def accuracy(model, test_x, test_y) -> float:
    """Fraction of argmax predictions matching the labels (ties resolve to the
    lowest class index)."""
    if len(test_x) == 0:
        raise ConfigError("empty evaluation set")
    return float(np.mean(_predicted_classes(model, test_x) == test_y))


def knn_compressive(model, train_x, train_y, test_x, test_y, k=5) -> float:
    """Majority-vote accuracy of K nearest neighbours in measurement space.

    Measurements are vectorized and compared by Euclidean distance (computed
    in float64); distance ties break toward the lower training index and vote
    ties toward the lower class index.
    """
    if k > len(train_x):
        raise ConfigError(f"k={k} exceeds the {len(train_x)} training samples")
    if len(test_x) == 0:
        raise ConfigError("empty evaluation set")
    z_train = model.measurements(train_x).reshape(len(train_x), -1).astype(np.float64)
    z_test = model.measurements(test_x).reshape(len(test_x), -1).astype(np.float64)
    n_classes = int(train_y.max()) + 1
    correct = 0
    for i in range(0, len(z_test), 64):
        block = z_test[i : i + 64]
        d = ((block[:, None, :] - z_train[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        for row, neighbours in enumerate(nearest):
            votes = np.bincount(train_y[neighbours], minlength=n_classes)
            if votes.argmax() == test_y[i + row]:
                correct += 1
    return correct / len(z_test)


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)
    teacher_checksums: list = field(default_factory=list)
    results: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        return _rows_to_csv(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def run_ablation(bundle: DatasetBundle, cfg: TrainConfig, measurement,
                 teacher=None, width=16, capacity="small") -> AblationReport:
    """Train one student per stage mask (all 8) against a single shared
    teacher and report test accuracy per mask.

    The teacher is trained once (or passed in) and its serialized checksum is
    recorded after every run, proving it was reused untouched.
    """
    if teacher is None:
        teacher = build_prior(bundle.signal_shape, measurement, bundle.n_classes,
                              width=width, capacity=capacity, seed=cfg.seed)
        train_prior_supervised(teacher, bundle, cfg)
    report = AblationReport()
    for mask in StageMask.all_masks():
        student = build_mcl(bundle.signal_shape, measurement, bundle.n_classes,
                            fs_kind="nonlinear", width=width, capacity=capacity,
                            seed=cfg.seed)
        result = train_mclwp(student, teacher, bundle, cfg, mask)
        acc = accuracy(student, bundle.test_x, bundle.test_y)
        report.rows.append({
            "run_id": f"ablate-{mask}-seed{cfg.seed}",
            "mask_s1": int(mask.sensing),
            "mask_s2": int(mask.synthesis),
            "mask_s3": int(mask.distill),
            "config": str(measurement),
            "seed": cfg.seed,
            "metric": "test_accuracy",
            "value": acc,
        })
        report.teacher_checksums.append(checkpoint.content_crc(teacher))
        report.results[str(mask)] = result
    return report


@dataclass
class PriorEffectReport:
    rows: list = field(default_factory=list)
    medians: dict = field(default_factory=dict)
    param_counts: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        return _rows_to_csv(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def compare_prior_effect(bundle: DatasetBundle, cfg: TrainConfig, measurement,
                         seeds=None, width=16, capacity="small") -> PriorEffectReport:
    """Paired comparison of the teacher-guided student against the identical
    architecture trained without a teacher, over several seeds.

    Reports one row per (method, seed) plus per-method medians; both methods
    share architecture, seeds, and parameter counts exactly.
    """
    if seeds is None:
        seeds = (cfg.seed, cfg.seed + 1, cfg.seed + 2)
    report = PriorEffectReport()
    accs = {"mclwp": [], "mclwop": []}
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        teacher = build_prior(bundle.signal_shape, measurement, bundle.n_classes,
                              width=width, capacity=capacity, seed=seed)
        train_prior_supervised(teacher, bundle, seed_cfg)
        guided = build_mcl(bundle.signal_shape, measurement, bundle.n_classes,
                           fs_kind="nonlinear", width=width, capacity=capacity,
                           seed=seed)
        train_mclwp(guided, teacher, bundle, seed_cfg, StageMask())
        control = build_mcl(bundle.signal_shape, measurement, bundle.n_classes,
                            fs_kind="nonlinear", width=width, capacity=capacity,
                            seed=seed)
        train_mclwop(control, bundle, seed_cfg)
        report.param_counts = {
            "mclwp": guided.param_count(),
            "mclwop": control.param_count(),
        }
        for name, model, mask in (
            ("mclwp", guided, ("1", "1", "1")),
            ("mclwop", control, ("", "", "")),
        ):
            acc = accuracy(model, bundle.test_x, bundle.test_y)
            accs[name].append(acc)
            report.rows.append({
                "run_id": f"{name}-seed{seed}",
                "mask_s1": mask[0],
                "mask_s2": mask[1],
                "mask_s3": mask[2],
                "config": str(measurement),
                "seed": seed,
                "metric": "test_accuracy",
                "value": acc,
            })
    for name, values in accs.items():
        median = statistics.median(values)
        report.medians[name] = median
        report.rows.append({
            "run_id": f"{name}-median",
            "mask_s1": "",
            "mask_s2": "",
            "mask_s3": "",
            "config": str(measurement),
            "seed": -1,
            "metric": "median_test_accuracy",
            "value": median,
        })
    return report
