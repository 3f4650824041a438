"""Synthetic classification data and per-worker sharding.

Everything here is a pure function of its arguments and seeds; the arrays
returned are read-only so they can be shared across workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gossipsim.errors import ConfigError
from gossipsim.model import Batch

__all__ = [
    "DatasetSpec",
    "ShardPlan",
    "generate_dataset",
    "class_means",
    "split_holdout",
    "shard",
    "replicated_plan",
    "next_batch",
    "batch_indices",
    "steps_per_epoch",
    "load_csv",
]


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 2000
    input_dim: int = 10
    n_classes: int = 10
    cluster_spread: float = 1.0
    heterogeneity: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("dataset needs at least 2 classes", key="n_classes")
        if self.n_samples < self.n_classes:
            raise ConfigError(
                f"n_samples ({self.n_samples}) must be >= n_classes ({self.n_classes})",
                key="n_samples",
            )
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1", key="input_dim")
        if self.input_dim < self.n_classes and self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2 when it is below n_classes", key="input_dim")
        if not self.cluster_spread > 0:
            raise ConfigError("cluster_spread must be positive", key="cluster_spread")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError("heterogeneity must lie in [0, 1]", key="heterogeneity")


@dataclass(frozen=True, eq=False)
class ShardPlan:
    n_workers: int
    assignments: tuple[np.ndarray, ...]

    @property
    def shard_size(self) -> int:
        return len(self.assignments[0]) if self.assignments else 0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def class_means(n_classes: int, input_dim: int) -> np.ndarray:
    """Cluster centres: simplex vertices ``e_c`` when ``input_dim >= n_classes``,
    otherwise evenly spaced points on the unit circle of the first two axes."""
    means = np.zeros((n_classes, input_dim))
    if input_dim >= n_classes:
        means[np.arange(n_classes), np.arange(n_classes)] = 1.0
    else:
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        means[:, 0] = np.cos(angles)
        means[:, 1] = np.sin(angles)
    return means


def generate_dataset(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Balanced Gaussian clusters, one per class, in shuffled order."""
    rng = np.random.default_rng([spec.seed, 0x5EED])
    labels = np.arange(spec.n_samples) % spec.n_classes
    labels = labels[rng.permutation(spec.n_samples)]
    noise = rng.standard_normal((spec.n_samples, spec.input_dim))
    inputs = class_means(spec.n_classes, spec.input_dim)[labels] + spec.cluster_spread * noise
    return _readonly(inputs), _readonly(labels.astype(np.int64))


def split_holdout(
    inputs: np.ndarray, labels: np.ndarray, fraction: float, seed: int
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Seeded train/test split; the last ``fraction`` of a permutation is held out."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("holdout fraction must lie in [0, 1)", key="holdout")
    n = labels.shape[0]
    perm = np.random.default_rng([seed, 0x7E57]).permutation(n)
    n_test = int(round(fraction * n))
    train, test = np.sort(perm[: n - n_test]), np.sort(perm[n - n_test :])
    return (
        (_readonly(inputs[train]), _readonly(labels[train])),
        (_readonly(inputs[test]), _readonly(labels[test])),
    )


def shard(
    n_samples: int,
    n_workers: int,
    heterogeneity: float,
    labels: np.ndarray,
    seed: int,
) -> ShardPlan:
    """Split ``n_samples`` into equal shards, one per worker.

    Each shard takes ``round(h * shard_size)`` samples from a label-sorted
    pool, as one contiguous run, and fills the rest from a uniform shuffle.
    Samples that do not fit an equal split are dropped from the tail of the
    seeded permutation.
    """
    if n_workers < 1:
        raise ConfigError("n_workers must be >= 1", key="n_workers")
    if n_workers > n_samples:
        raise ConfigError(
            f"n_workers ({n_workers}) exceeds the number of samples ({n_samples})",
            key="n_workers",
        )
    if not 0.0 <= heterogeneity <= 1.0:
        raise ConfigError("heterogeneity must lie in [0, 1]", key="heterogeneity")
    labels = np.asarray(labels)
    if labels.shape[0] != n_samples:
        raise ConfigError("labels length must equal n_samples")

    size = n_samples // n_workers
    sorted_per_worker = int(round(heterogeneity * size))
    perm = np.random.default_rng([seed, 0x54A2D]).permutation(n_samples)
    n_sorted = sorted_per_worker * n_workers
    sorted_pool = perm[:n_sorted]
    sorted_pool = sorted_pool[np.argsort(labels[sorted_pool], kind="stable")]
    uniform_pool = perm[n_sorted : size * n_workers]

    rest = size - sorted_per_worker
    assignments = []
    for w in range(n_workers):
        part = np.concatenate(
            [
                sorted_pool[w * sorted_per_worker : (w + 1) * sorted_per_worker],
                uniform_pool[w * rest : (w + 1) * rest],
            ]
        )
        assignments.append(_readonly(part.astype(np.int64)))
    return ShardPlan(n_workers, tuple(assignments))


def replicated_plan(n_samples: int, n_workers: int) -> ShardPlan:
    """Every worker holds the full dataset (identical shards)."""
    full = _readonly(np.arange(n_samples, dtype=np.int64))
    return ShardPlan(n_workers, tuple(full for _ in range(n_workers)))


def steps_per_epoch(plan: ShardPlan, batch_size: int) -> int:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", key="batch_size")
    if batch_size > plan.shard_size:
        raise ConfigError(
            f"batch_size ({batch_size}) exceeds the shard size ({plan.shard_size})",
            key="batch_size",
        )
    return plan.shard_size // batch_size


def batch_indices(
    plan: ShardPlan, worker: int, batch_size: int, epoch: int, step: int, seed: int
) -> np.ndarray:
    """Sample indices of one batch; the shard is reshuffled every epoch.

    The reshuffle is keyed by ``(seed, worker, epoch)``. Identical shards (a
    replicated plan) therefore still see different orders per worker unless
    the caller passes the same ``worker`` key.
    """
    n_steps = steps_per_epoch(plan, batch_size)
    if not 0 <= step < n_steps:
        raise ConfigError(f"step {step} outside [0, {n_steps})")
    order = np.random.default_rng([seed, worker, epoch]).permutation(plan.shard_size)
    return plan.assignments[worker][order[step * batch_size : (step + 1) * batch_size]]


def next_batch(
    plan: ShardPlan,
    worker: int,
    batch_size: int,
    epoch: int,
    step: int,
    seed: int,
    inputs: np.ndarray,
    labels: np.ndarray,
) -> Batch:
    idx = batch_indices(plan, worker, batch_size, epoch, step, seed)
    return Batch(inputs[idx], labels[idx], idx)


def load_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset with header ``f0,...,f{d-1},label``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty CSV file", key="csv_path") from None
        header = [h.strip() for h in header]
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or header != expected:
            raise ConfigError(
                f"{path}:1: header must be f0..f{{d-1}},label; got {','.join(header)}",
                key="csv_path",
            )
        rows_x, rows_y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ConfigError(f"{path}:{lineno}: expected {d + 1} fields", key="csv_path")
            try:
                rows_x.append([float(v) for v in row[:d]])
                label = float(row[d])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: non-numeric field", key="csv_path") from None
            if label != math.floor(label) or label < 0:
                raise ConfigError(f"{path}:{lineno}: label must be a nonnegative integer")
            rows_y.append(int(label))
    if not rows_y:
        raise ConfigError(f"{path}: no data rows", key="csv_path")
    x = np.asarray(rows_x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ConfigError(f"{path}: features must be finite", key="csv_path")
    return _readonly(x), _readonly(np.asarray(rows_y, dtype=np.int64))
