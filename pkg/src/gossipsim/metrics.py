"""Cross-replica dispersion statistics and strategy ranking.

The four statistics are computed over one scalar per worker, the L2 norm of
a parameter tensor, taken before the tensors are averaged.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from gossipsim.errors import AlignmentError

__all__ = [
    "TensorDispersion",
    "MetricsRecord",
    "RankTable",
    "gini",
    "index_of_dispersion",
    "coefficient_of_variation",
    "quartile_coefficient",
    "capture_dispersion",
    "capture_dispersion_matrix",
    "rank_strategies",
    "mean_gini",
    "METRICS_CSV_COLUMNS",
    "metrics_csv_rows",
    "write_metrics_csv",
    "write_metrics_ndjson",
    "write_rank_csv",
]


def _as_values(values: Sequence[float] | np.ndarray) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"need a vector of at least 2 values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if np.any(x < 0):
        raise ValueError("dispersion statistics are defined for nonnegative values only")
    return x


def gini(values: Sequence[float] | np.ndarray) -> float:
    """Mean absolute pairwise difference over twice the mean.

    Equals ``sum_i sum_j |x_i - x_j| / (2 n**2 mu)``, evaluated in
    ``O(n log n)`` via the sorted-rank identity. Returns 0 when the mean is 0.
    """
    x = np.sort(_as_values(values))
    n = x.shape[0]
    total = x.sum()
    if total <= 0:
        return 0.0
    ranks = 2.0 * np.arange(1, n + 1) - n - 1
    # ranks sum to zero, so shifting by the minimum is exact and makes equal values give 0
    return max(float(np.dot(ranks, x - x[0]) / (n * total)), 0.0)


def index_of_dispersion(values: Sequence[float] | np.ndarray) -> float:
    """Population variance over the mean."""
    x = _as_values(values)
    mu = x.mean()
    if mu <= 0:
        return 0.0
    return float((x - x[0]).var() / mu)


def coefficient_of_variation(values: Sequence[float] | np.ndarray) -> float:
    """Population standard deviation over the mean."""
    x = _as_values(values)
    mu = x.mean()
    if mu <= 0:
        return 0.0
    return float((x - x[0]).std() / mu)


def quartile_coefficient(values: Sequence[float] | np.ndarray) -> float:
    """``(Q3 - Q1) / (Q3 + Q1)`` with linearly interpolated quartiles."""
    x = _as_values(values)
    q1, q3 = np.percentile(x, [25.0, 75.0])
    if q1 + q3 <= 0:
        return 0.0
    return float((q3 - q1) / (q3 + q1))


@dataclass(frozen=True)
class TensorDispersion:
    tensor: str
    gini: float
    index_of_dispersion: float
    coefficient_of_variation: float
    quartile_coefficient: float
    # set when a denominator was zero and a statistic fell back to 0
    degenerate: bool = False


def _dispersion(name: str, norms: np.ndarray) -> TensorDispersion:
    g = gini(norms)
    mu = float(norms.mean())
    q1, q3 = np.percentile(norms, [25.0, 75.0])
    return TensorDispersion(
        tensor=name,
        gini=g,
        index_of_dispersion=index_of_dispersion(norms),
        coefficient_of_variation=coefficient_of_variation(norms),
        quartile_coefficient=quartile_coefficient(norms),
        degenerate=bool(mu <= 0 or q1 + q3 <= 0),
    )


def capture_dispersion_matrix(
    params: np.ndarray, segments: Sequence[object]
) -> list[TensorDispersion]:
    """Dispersion per tensor segment for a ``workers x params`` matrix."""
    if params.ndim != 2 or params.shape[0] < 2:
        raise ValueError("dispersion needs at least 2 workers")
    out = []
    for seg in segments:
        block = params[:, seg.offset : seg.offset + seg.length]  # type: ignore[attr-defined]
        norms = np.sqrt(np.einsum("ij,ij->i", block, block))
        out.append(_dispersion(seg.name, norms))  # type: ignore[attr-defined]
    return out


def capture_dispersion(workers: Sequence[object]) -> list[TensorDispersion]:
    """Per-tensor dispersion of worker L2 norms for a list of ParamVectors."""
    if len(workers) < 2:
        raise ValueError("dispersion needs at least 2 workers")
    segments = workers[0].segments  # type: ignore[attr-defined]
    for w in workers[1:]:
        if w.segments != segments:  # type: ignore[attr-defined]
            raise ValueError("workers do not share one parameter segmentation")
    stacked = np.stack([w.values for w in workers])  # type: ignore[attr-defined]
    return capture_dispersion_matrix(stacked, segments)


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    strategy: str
    epoch: int
    iteration: int
    mean_train_loss: float
    test_accuracy: float | None = None
    train_accuracy: float | None = None
    tensors: tuple[TensorDispersion, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, object]:
        d = asdict(self)
        d["tensors"] = [asdict(t) for t in self.tensors]
        return d


def mean_gini(record: MetricsRecord) -> float:
    if not record.tensors:
        return 0.0
    return math.fsum(t.gini for t in record.tensors) / len(record.tensors)


@dataclass(frozen=True)
class RankTable:
    strategies: tuple[str, ...]
    iterations: tuple[int, ...]
    ranks: tuple[tuple[int, ...], ...]

    def column(self, strategy: str) -> list[int]:
        j = self.strategies.index(strategy)
        return [row[j] for row in self.ranks]


_REDUCERS = {"mean_over_tensors": mean_gini}


def rank_strategies(
    records: Mapping[str, Iterable[MetricsRecord]],
    reducer: str = "mean_over_tensors",
) -> RankTable:
    """Rank strategies per iteration by reduced Gini, 1 = lowest dispersion.

    Ties keep the mapping's declaration order.
    """
    try:
        reduce = _REDUCERS[reducer]
    except KeyError:
        raise ValueError(f"unknown reducer {reducer!r}") from None
    strategies = tuple(records)
    if not strategies:
        raise ValueError("need at least one strategy")
    by_iter: dict[str, dict[int, float]] = {}
    for name in strategies:
        series: dict[int, float] = {}
        for rec in records[name]:
            series[rec.iteration] = reduce(rec)
        by_iter[name] = series

    all_iters = sorted(set().union(*(s.keys() for s in by_iter.values())))
    for name in strategies:
        missing = [it for it in all_iters if it not in by_iter[name]]
        if missing:
            raise AlignmentError(
                f"stream {name!r} is missing iteration {missing[0]}"
            )

    rows = []
    for it in all_iters:
        scores = np.array([by_iter[name][it] for name in strategies])
        order = np.argsort(scores, kind="stable")
        rank = np.empty(len(strategies), dtype=np.int64)
        rank[order] = np.arange(1, len(strategies) + 1)
        rows.append(tuple(int(r) for r in rank))
    return RankTable(strategies, tuple(all_iters), tuple(rows))


METRICS_CSV_COLUMNS = (
    "run_id",
    "strategy",
    "epoch",
    "iteration",
    "mean_train_loss",
    "test_accuracy",
    "train_accuracy",
    "tensor",
    "gini",
    "index_of_dispersion",
    "coefficient_of_variation",
    "quartile_coefficient",
    "degenerate",
)


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    return repr(float(x))


def metrics_csv_rows(record: MetricsRecord) -> list[list[str]]:
    head = [
        record.run_id,
        record.strategy,
        str(record.epoch),
        str(record.iteration),
        _fmt(record.mean_train_loss),
        _fmt(record.test_accuracy),
        _fmt(record.train_accuracy),
    ]
    if not record.tensors:
        return [head + ["", "", "", "", "", ""]]
    return [
        head
        + [
            t.tensor,
            _fmt(t.gini),
            _fmt(t.index_of_dispersion),
            _fmt(t.coefficient_of_variation),
            _fmt(t.quartile_coefficient),
            "1" if t.degenerate else "0",
        ]
        for t in record.tensors
    ]


def write_metrics_csv(records: Iterable[MetricsRecord], fh: io.TextIOBase, header: bool = True) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(METRICS_CSV_COLUMNS)
    for rec in records:
        writer.writerows(metrics_csv_rows(rec))


def write_metrics_ndjson(records: Iterable[MetricsRecord], fh: io.TextIOBase) -> None:
    for rec in records:
        fh.write(json.dumps(rec.to_dict(), sort_keys=True, allow_nan=True))
        fh.write("\n")


def write_rank_csv(
    table: RankTable, fh: io.TextIOBase, group: Mapping[str, object] | None = None, header: bool = True
) -> None:
    """One row per iteration: optional group columns, iteration, one rank per strategy."""
    writer = csv.writer(fh, lineterminator="\n")
    group = dict(group or {})
    if header:
        writer.writerow([*group.keys(), "iteration", *table.strategies])
    for it, row in zip(table.iterations, table.ranks):
        writer.writerow([*map(str, group.values()), str(it), *map(str, row)])
