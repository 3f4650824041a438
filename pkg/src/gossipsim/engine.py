"""Lockstep simulation of centralized and decentralized data-parallel SGD.

Every iteration each worker draws a batch from its shard, computes a local
gradient, and then the strategy synchronizes the replicas:

- ``C_complete`` averages gradients globally; replicas stay bit-identical.
- ``D_*`` strategies average parameters with graph neighbors through the
  mixing matrix, either after the local step (``gradient_then_average``) or
  before it (``average_then_gradient``).
- ``Ada`` is decentralized over a ring lattice whose coordination number
  shrinks at epoch boundaries.

Neighbor averaging is evaluated as ``x_i + sum_j w_ij (x_j - x_i)`` over
ascending ``j``. This equals ``sum_j w_ij x_j`` for row-stochastic weights,
keeps the small cross-replica differences exact, and leaves identical
replicas bit-identical.
"""

from __future__ import annotations

import enum
import math
import time
from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from gossipsim import data as data_mod
from gossipsim import model as model_mod
from gossipsim.errors import ConfigError, DivergenceError, NumericalError
from gossipsim.metrics import MetricsRecord, TensorDispersion, capture_dispersion_matrix
from gossipsim.model import ModelSpec, ParamVector, Segment
from gossipsim.schedules import AdaParams, LRSchedule, ada_degree, effective_lr
from gossipsim.topology import (
    MixingMatrix,
    Topology,
    TopologyKind,
    build_topology,
    mixing_matrix,
)

if TYPE_CHECKING:
    from gossipsim.config import ExperimentConfig

__all__ = [
    "StrategyKind",
    "UpdateOrder",
    "Strategy",
    "RunState",
    "initial_state",
    "local_update",
    "gossip",
    "consensus_mean",
    "sync_step",
    "topology_for",
    "degree_schedule",
    "message_volume",
    "total_message_volume",
    "Simulation",
    "RunResult",
    "run_experiment",
]


class StrategyKind(str, enum.Enum):
    CENTRALIZED_COMPLETE = "C_complete"
    DECENTRALIZED_COMPLETE = "D_complete"
    DECENTRALIZED_RING = "D_ring"
    DECENTRALIZED_TORUS = "D_torus"
    DECENTRALIZED_EXPONENTIAL = "D_exponential"
    DECENTRALIZED_ADAPTIVE = "Ada"

    @property
    def centralized(self) -> bool:
        return self is StrategyKind.CENTRALIZED_COMPLETE

    @property
    def topology_kind(self) -> TopologyKind:
        return _STRATEGY_TOPOLOGY[self]

    @classmethod
    def parse(cls, strategy: str | StrategyKind, topology: str | None = None) -> StrategyKind:
        """Accept short names (``D_ring``, ``Ada``), long names
        (``decentralized_ring``) or a mode plus ``topology``."""
        if isinstance(strategy, StrategyKind):
            kind = strategy
        else:
            key = str(strategy).strip().lower().replace("-", "_")
            if key in _MODES:
                if topology is None:
                    default = "ring_lattice" if key == "adaptive" else "complete" if key == "centralized" else None
                    if default is None:
                        raise ConfigError(f"strategy {strategy!r} needs a topology", key="topology")
                    topology = default
                topo = TopologyKind.parse(topology)
                try:
                    return _MODE_TABLE[(key, topo)]
                except KeyError:
                    raise ConfigError(
                        f"strategy {strategy!r} does not support topology {topo.value!r}",
                        key="topology",
                    ) from None
            kind = _STRATEGY_NAMES.get(key.replace("_", ""))  # type: ignore[assignment]
            if kind is None:
                choices = ", ".join(k.value for k in cls)
                raise ConfigError(f"unknown strategy {strategy!r}; expected one of: {choices}", key="strategy")
        if topology is not None and TopologyKind.parse(topology) is not kind.topology_kind:
            raise ConfigError(
                f"strategy {kind.value} runs on {kind.topology_kind.value}, not {topology!r}",
                key="topology",
            )
        return kind


_STRATEGY_TOPOLOGY = {
    StrategyKind.CENTRALIZED_COMPLETE: TopologyKind.COMPLETE,
    StrategyKind.DECENTRALIZED_COMPLETE: TopologyKind.COMPLETE,
    StrategyKind.DECENTRALIZED_RING: TopologyKind.RING,
    StrategyKind.DECENTRALIZED_TORUS: TopologyKind.TORUS,
    StrategyKind.DECENTRALIZED_EXPONENTIAL: TopologyKind.EXPONENTIAL,
    StrategyKind.DECENTRALIZED_ADAPTIVE: TopologyKind.RING_LATTICE,
}
_MODES = {"centralized", "decentralized", "adaptive"}
_MODE_TABLE = {
    ("centralized", TopologyKind.COMPLETE): StrategyKind.CENTRALIZED_COMPLETE,
    ("adaptive", TopologyKind.RING_LATTICE): StrategyKind.DECENTRALIZED_ADAPTIVE,
    **{
        ("decentralized", t): k
        for k, t in _STRATEGY_TOPOLOGY.items()
        if k not in (StrategyKind.CENTRALIZED_COMPLETE, StrategyKind.DECENTRALIZED_ADAPTIVE)
    },
}
_STRATEGY_NAMES = {
    **{k.value.lower().replace("_", ""): k for k in StrategyKind},
    **{k.name.lower().replace("_", ""): k for k in StrategyKind},
    "dadaptive": StrategyKind.DECENTRALIZED_ADAPTIVE,
    "adaptive": StrategyKind.DECENTRALIZED_ADAPTIVE,
}


class UpdateOrder(str, enum.Enum):
    GRADIENT_THEN_AVERAGE = "gradient_then_average"
    AVERAGE_THEN_GRADIENT = "average_then_gradient"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    update_order: UpdateOrder = UpdateOrder.GRADIENT_THEN_AVERAGE
    ada: AdaParams | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StrategyKind.parse(self.kind))
        object.__setattr__(self, "update_order", UpdateOrder(self.update_order))
        adaptive = self.kind is StrategyKind.DECENTRALIZED_ADAPTIVE
        if adaptive and self.ada is None:
            raise ConfigError("Ada needs k0 and gamma_k", key="k0")
        if not adaptive and self.ada is not None:
            raise ConfigError(f"{self.kind.value} does not take Ada parameters", key="k0")


@dataclass(frozen=True, eq=False)
class RunState:
    """Replica parameters as a ``workers x params`` matrix plus run position."""

    params: np.ndarray
    segments: tuple[Segment, ...]
    epoch: int = 0
    iteration: int = 0
    topology: Topology | None = None
    rng_seed: int = 0

    @property
    def n_workers(self) -> int:
        return self.params.shape[0]

    @property
    def workers(self) -> list[ParamVector]:
        out = []
        for row in self.params:
            v = row.copy()
            v.setflags(write=False)
            out.append(ParamVector(v, self.segments))
        return out


def initial_state(init: ParamVector, n_workers: int, seed: int = 0, topology: Topology | None = None) -> RunState:
    params = np.tile(init.values, (n_workers, 1))
    params.setflags(write=False)
    return RunState(params, init.segments, topology=topology, rng_seed=seed)


def gossip(x: np.ndarray, mix: MixingMatrix) -> np.ndarray:
    """One round of neighbor averaging of the rows of ``x``."""
    if x.shape[0] != mix.n:
        raise ValueError(f"{x.shape[0]} replicas but a {mix.n}-node mixing matrix")
    idx, w = mix.offdiag_table
    out = x.copy()
    for s in range(idx.shape[1]):
        out += w[:, s, None] * (x[idx[:, s]] - x)
    return out


def consensus_mean(x: np.ndarray) -> np.ndarray:
    """Mean of the rows, accumulated as deviations from row 0 (exact for equal rows)."""
    n = x.shape[0]
    out = x[0].copy()
    inv = 1.0 / n
    for j in range(1, n):
        out += inv * (x[j] - x[0])
    return out


def local_update(
    params: np.ndarray, strategy: Strategy, mix: MixingMatrix, grads: np.ndarray, lr: float
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the strategy, returning ``(new_params, pre_average_params)``.

    ``pre_average_params`` is the replica state at the moment parameters are
    averaged; it is what dispersion statistics are captured from.
    """
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if strategy.kind.centralized:
        g = consensus_mean(grads)
        new = params - lr * g[None, :]
        return new, params
    if strategy.update_order is UpdateOrder.GRADIENT_THEN_AVERAGE:
        pre = params - lr * grads
        return gossip(pre, mix), pre
    return gossip(params, mix) - lr * grads, params


def sync_step(
    state: RunState,
    strategy: Strategy,
    mix: MixingMatrix,
    grads: np.ndarray | Sequence[ParamVector],
    lr: float,
    on_pre_average: Callable[[np.ndarray], None] | None = None,
) -> RunState:
    g = grads if isinstance(grads, np.ndarray) else np.stack([p.values for p in grads])
    # non-finite results are reported below as a DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        new, pre = local_update(state.params, strategy, mix, g, lr)
    if on_pre_average is not None:
        on_pre_average(pre)
    iteration = state.iteration + 1
    if not np.all(np.isfinite(new)):
        raise DivergenceError(
            "non-finite parameter after update",
            strategy=strategy.kind.value,
            epoch=state.epoch,
            iteration=iteration,
        )
    new.setflags(write=False)
    return replace(state, params=new, iteration=iteration)


def topology_for(
    strategy: Strategy, n_workers: int, epoch: int = 0, torus_dims: tuple[int, int] | None = None
) -> Topology:
    """Graph used by ``strategy`` during ``epoch``.

    Fewer than three workers cannot form a ring, torus or lattice; every
    strategy then averages over the complete graph of 1 or 2 nodes.
    """
    if n_workers < 3:
        return build_topology(TopologyKind.COMPLETE, n_workers)
    kind = strategy.kind.topology_kind
    if kind is TopologyKind.RING_LATTICE:
        assert strategy.ada is not None
        return build_topology(kind, n_workers, k=ada_degree(strategy.ada, epoch))
    return build_topology(kind, n_workers, torus_dims=torus_dims)


def degree_schedule(
    strategy: Strategy, n_workers: int, epochs: int, torus_dims: tuple[int, int] | None = None
) -> list[int]:
    """Node degree (out-degree for exponential) used in each epoch."""
    if n_workers < 3 or strategy.kind is not StrategyKind.DECENTRALIZED_ADAPTIVE:
        d = topology_for(strategy, n_workers, 0, torus_dims).max_degree
        return [d] * epochs
    assert strategy.ada is not None
    return [2 * ada_degree(strategy.ada, e) for e in range(epochs)]


def message_volume(
    degrees: Sequence[int],
    steps_per_epoch: int,
    n_params: int,
    *,
    centralized: bool = False,
    n_workers: int = 1,
) -> float:
    """Parameter elements sent per worker over a run.

    Decentralized workers send ``degree * n_params`` per iteration; the
    centralized baseline is costed as a ring all-reduce,
    ``2 * n_params * (n - 1) / n`` per iteration.
    """
    if centralized:
        per_iter = 2.0 * n_params * (n_workers - 1) / n_workers
        return per_iter * steps_per_epoch * len(degrees)
    return float(sum(d * n_params * steps_per_epoch for d in degrees))


def total_message_volume(config: ExperimentConfig) -> float:
    strategy = config.strategy_obj
    degrees = degree_schedule(strategy, config.n_workers, config.epochs, config.torus_dims)
    return message_volume(
        degrees,
        config.steps_per_epoch(),
        model_mod.param_count(config.model_spec()),
        centralized=strategy.kind.centralized,
        n_workers=config.n_workers,
    )


@dataclass
class RunResult:
    """Outcome of a finished (or aborted) run."""

    run_id: str
    strategy: str
    final_params: np.ndarray | None = None
    final_test_accuracy: float | None = None
    final_train_accuracy: float | None = None
    final_train_loss: float | None = None
    epoch_test_accuracy: list[float] = field(default_factory=list)
    epoch_train_accuracy: list[float] = field(default_factory=list)
    iterations: int = 0
    message_volume: float = 0.0
    diverged: bool = False
    divergence: str | None = None
    wall_time: float = 0.0

    def epochs_to_accuracy(self, target: float, split: str = "test") -> int | None:
        """1-based count of epochs until the mean model first reaches ``target``."""
        series = self.epoch_test_accuracy if split == "test" else self.epoch_train_accuracy
        for e, acc in enumerate(series, start=1):
            if acc >= target:
                return e
        return None

    def summary(self) -> dict[str, object]:
        return {
            "run_id": self.run_id,
            "strategy": self.strategy,
            "final_test_accuracy": self.final_test_accuracy,
            "final_train_accuracy": self.final_train_accuracy,
            "final_train_loss": self.final_train_loss,
            "iterations": self.iterations,
            "message_volume": self.message_volume,
            "diverged": self.diverged,
            "divergence": self.divergence,
            "wall_time": self.wall_time,
        }


class Simulation:
    """One configured run. Iterate :meth:`records` to execute it.

    ``parallelism`` sets how many threads compute per-worker gradients; the
    results do not depend on it.
    """

    def __init__(self, config: ExperimentConfig, parallelism: int | None = None) -> None:
        self.config = config
        self.parallelism = max(1, parallelism if parallelism is not None else config.parallelism)
        self.strategy = config.strategy_obj
        self.spec: ModelSpec = config.model_spec()
        (x_train, y_train), (x_test, y_test) = config.load_data()
        self.x_train, self.y_train = x_train, y_train
        self.x_test, self.y_test = x_test, y_test
        n = config.n_workers
        if config.data_mode == "replicated":
            self.plan = data_mod.replicated_plan(len(y_train), n)
        else:
            self.plan = data_mod.shard(len(y_train), n, config.heterogeneity, y_train, config.seed)
        self.steps = data_mod.steps_per_epoch(self.plan, config.batch_size)
        self.result = RunResult(config.run_id, self.strategy.kind.value)

    def _batch(self, worker: int, epoch: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        key = 0 if self.config.data_mode == "replicated" else worker
        idx = data_mod.batch_indices(self.plan, key, self.config.batch_size, epoch, step, self.config.seed)
        return self.x_train[idx], self.y_train[idx]

    def _gradients(
        self, params: np.ndarray, epoch: int, step: int, pool: ThreadPoolExecutor | None
    ) -> tuple[list[float], np.ndarray]:
        def one(w: int) -> tuple[float, np.ndarray]:
            xb, yb = self._batch(w, epoch, step)
            return model_mod.forward_backward(params[w], self.spec, xb, yb)

        workers = range(params.shape[0])
        results = list(pool.map(one, workers)) if pool is not None else [one(w) for w in workers]
        return [r[0] for r in results], np.stack([r[1] for r in results])

    def records(self, on_state: Callable[[RunState], None] | None = None) -> Iterator[MetricsRecord]:
        """Run the simulation lazily, one record per iteration.

        ``on_state`` receives the replica state after every synchronization.
        """
        cfg = self.config
        res = self.result
        start = time.perf_counter()
        init = model_mod.init_params(self.spec)
        state = initial_state(init, cfg.n_workers, cfg.seed)
        n_params = init.values.shape[0]
        pool = ThreadPoolExecutor(self.parallelism) if self.parallelism > 1 else None
        try:
            for epoch in range(cfg.epochs):
                topo = topology_for(self.strategy, cfg.n_workers, epoch, cfg.torus_dims)
                mix = mixing_matrix(topo)
                degree = topo.max_degree
                lr = effective_lr(cfg.schedule, epoch, cfg.batch_size, degree)
                state = replace(state, epoch=epoch, topology=topo)
                if self.strategy.kind.centralized:
                    res.message_volume += message_volume(
                        [degree], self.steps, n_params, centralized=True, n_workers=cfg.n_workers
                    )
                else:
                    res.message_volume += message_volume([degree], self.steps, n_params)
                for step in range(self.steps):
                    try:
                        losses, grads = self._gradients(state.params, epoch, step, pool)
                    except NumericalError as exc:
                        raise DivergenceError(
                            str(exc),
                            strategy=self.strategy.kind.value,
                            epoch=epoch,
                            iteration=state.iteration + 1,
                        ) from exc
                    captured: list[np.ndarray] = []
                    state = sync_step(state, self.strategy, mix, grads, lr, captured.append)
                    if on_state is not None:
                        on_state(state)
                    try:
                        tensors = self._dispersion(captured[0])
                    except ValueError as exc:
                        # finite parameters whose norms overflow
                        raise DivergenceError(
                            f"parameter norms are not finite: {exc}",
                            strategy=self.strategy.kind.value,
                            epoch=epoch,
                            iteration=state.iteration,
                        ) from exc
                    last = step == self.steps - 1
                    test_acc = train_acc = None
                    if last:
                        mean = consensus_mean(state.params)
                        test_acc = model_mod.accuracy(mean, self.spec, self.x_test, self.y_test)
                        train_acc = model_mod.accuracy(mean, self.spec, self.x_train, self.y_train)
                        res.epoch_test_accuracy.append(test_acc)
                        res.epoch_train_accuracy.append(train_acc)
                        res.final_test_accuracy = test_acc
                        res.final_train_accuracy = train_acc
                        res.final_params = mean
                    loss = math.fsum(losses) / len(losses)
                    res.final_train_loss = loss
                    res.iterations = state.iteration
                    yield MetricsRecord(
                        run_id=cfg.run_id,
                        strategy=self.strategy.kind.value,
                        epoch=epoch,
                        iteration=state.iteration,
                        mean_train_loss=loss,
                        test_accuracy=test_acc,
                        train_accuracy=train_acc,
                        tensors=tensors,
                    )
        except DivergenceError as exc:
            res.diverged = True
            res.divergence = str(exc)
            raise
        finally:
            if pool is not None:
                pool.shutdown()
            res.wall_time = time.perf_counter() - start

    def _dispersion(self, pre: np.ndarray) -> tuple[TensorDispersion, ...]:
        if pre.shape[0] < 2:
            return tuple(
                TensorDispersion(seg.name, 0.0, 0.0, 0.0, 0.0, degenerate=True)
                for seg in model_mod.layout(self.spec)
            )
        return tuple(capture_dispersion_matrix(pre, model_mod.layout(self.spec)))

    def run(self) -> tuple[list[MetricsRecord], RunResult]:
        """Execute to completion, returning all records and the result."""
        records = list(self.records())
        return records, self.result


def run_experiment(config: ExperimentConfig, parallelism: int | None = None) -> Iterator[MetricsRecord]:
    return Simulation(config, parallelism).records()
