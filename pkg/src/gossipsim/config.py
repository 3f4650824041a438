"""Experiment and sweep configuration: parsing, validation, resolution.

A config document is JSON or TOML. Top-level keys::

    strategy, topology, n_workers, torus_dims, k0, gamma_k, k_min,
    update_order, model, dataset, schedule, epochs, batch_size, seed,
    heterogeneity, data_mode, parallelism, run_id, out, emit, sweep

A document with a ``sweep`` table describes a :class:`SweepConfig`; the rest
of the document is the base cell.
"""

from __future__ import annotations

import itertools
import json
import os
import re
import sys
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gossipsim import data as data_mod
from gossipsim.engine import Strategy, StrategyKind, UpdateOrder
from gossipsim.errors import ConfigError
from gossipsim.model import ModelKind, ModelSpec
from gossipsim.schedules import AdaParams, LRSchedule
from gossipsim.topology import TopologyKind, build_topology

__all__ = [
    "ModelConfig",
    "DatasetConfig",
    "ExperimentConfig",
    "SweepConfig",
    "load_document",
    "parse_config",
    "parse_document",
    "load_config",
    "OUTPUT_ENV",
]

OUTPUT_ENV = "GOSSIPSIM_OUT"

_TOP_KEYS = {
    "strategy",
    "topology",
    "n_workers",
    "torus_dims",
    "k0",
    "gamma_k",
    "k_min",
    "update_order",
    "model",
    "dataset",
    "schedule",
    "epochs",
    "batch_size",
    "seed",
    "heterogeneity",
    "data_mode",
    "parallelism",
    "run_id",
    "out",
    "emit",
}
_EMIT_FORMATS = {"csv", "ndjson"}


@dataclass(frozen=True)
class ModelConfig:
    kind: ModelKind = ModelKind.LINEAR
    hidden_dim: int | None = None
    bias: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "hidden_dim": self.hidden_dim, "bias": self.bias}


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 2000
    input_dim: int = 10
    n_classes: int = 10
    cluster_spread: float = 1.0
    holdout: float = 0.2
    # None: follow the experiment seed
    seed: int | None = None
    csv_path: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "cluster_spread": self.cluster_spread,
            "holdout": self.holdout,
            "seed": self.seed,
            "csv_path": self.csv_path,
        }


@lru_cache(maxsize=8)
def _csv_dataset(path: str) -> tuple[np.ndarray, np.ndarray]:
    return data_mod.load_csv(path)


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: StrategyKind = StrategyKind.DECENTRALIZED_RING
    n_workers: int = 16
    torus_dims: tuple[int, int] | None = None
    k0: int | None = None
    gamma_k: float | None = None
    k_min: int = 2
    update_order: UpdateOrder = UpdateOrder.GRADIENT_THEN_AVERAGE
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: LRSchedule = field(default_factory=lambda: LRSchedule.constant(0.1))
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    heterogeneity: float = 0.0
    data_mode: str = "sharded"
    parallelism: int = 1
    run_id: str | None = None
    out: str | None = None
    emit: tuple[str, ...] = ("csv",)

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", StrategyKind.parse(self.strategy))
        object.__setattr__(self, "update_order", UpdateOrder(self.update_order))
        if self.run_id is None:
            object.__setattr__(self, "run_id", f"{self.strategy.value}-n{self.n_workers}-s{self.seed}")
        self._validate()

    def _validate(self) -> None:
        for key in ("n_workers", "epochs", "batch_size", "parallelism"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{key} must be an integer >= 1, got {value!r}", key=key)
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed!r}", key="seed")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError("heterogeneity must lie in [0, 1]", key="heterogeneity")
        if self.data_mode not in ("sharded", "replicated"):
            raise ConfigError("data_mode must be 'sharded' or 'replicated'", key="data_mode")
        bad = set(self.emit) - _EMIT_FORMATS
        if bad or not self.emit:
            raise ConfigError(f"emit must be a non-empty subset of {sorted(_EMIT_FORMATS)}", key="emit")
        if self.model.kind is ModelKind.MLP and not self.model.hidden_dim:
            raise ConfigError("mlp model needs hidden_dim", key="model")
        if self.strategy is StrategyKind.DECENTRALIZED_ADAPTIVE:
            if self.gamma_k is None:
                raise ConfigError("Ada needs gamma_k", key="gamma_k")
            ada = self.ada_params()
            if self.n_workers >= 3:
                ada.check_workers(self.n_workers)
                if 2 * ada.k_min > self.n_workers - 1:
                    raise ConfigError(
                        f"k_min={ada.k_min} is too large for n_workers={self.n_workers}", key="k_min"
                    )
        if self.strategy is StrategyKind.DECENTRALIZED_TORUS and self.n_workers >= 3:
            try:
                build_topology(TopologyKind.TORUS, self.n_workers, torus_dims=self.torus_dims)
            except ConfigError as exc:
                raise ConfigError(str(exc), key="torus_dims" if self.torus_dims else "n_workers") from None
        rng = self.schedule.epoch_range
        if rng is not None and (rng[0] > 0 or rng[1] < self.epochs):
            raise ConfigError(
                f"schedule phases cover epochs [{rng[0]}, {rng[1]}) but the run has {self.epochs} epochs",
                key="schedule",
            )
        ds = self.dataset
        if ds.csv_path is None:
            data_mod.DatasetSpec(
                ds.n_samples, ds.input_dim, ds.n_classes, ds.cluster_spread, self.heterogeneity, self.data_seed
            )
        if not 0.0 <= ds.holdout < 1.0:
            raise ConfigError("dataset.holdout must lie in [0, 1)", key="dataset")
        n_train = self.train_size()
        if self.data_mode == "sharded" and self.n_workers > n_train:
            raise ConfigError(
                f"n_workers ({self.n_workers}) exceeds training samples ({n_train})", key="n_workers"
            )
        shard = n_train if self.data_mode == "replicated" else n_train // self.n_workers
        if self.batch_size > shard:
            raise ConfigError(
                f"batch_size ({self.batch_size}) exceeds the shard size ({shard})", key="batch_size"
            )

    @property
    def data_seed(self) -> int:
        return self.dataset.seed if self.dataset.seed is not None else self.seed

    def ada_params(self) -> AdaParams:
        k0 = self.k0 if self.k0 is not None else max((self.n_workers - 1) // 2, self.k_min)
        return AdaParams(int(k0), float(self.gamma_k or 0.0), self.k_min)

    @cached_property
    def strategy_obj(self) -> Strategy:
        ada = self.ada_params() if self.strategy is StrategyKind.DECENTRALIZED_ADAPTIVE else None
        return Strategy(self.strategy, self.update_order, ada)

    def _dims(self) -> tuple[int, int]:
        ds = self.dataset
        if ds.csv_path is not None:
            x, y = _csv_dataset(ds.csv_path)
            return x.shape[1], max(int(y.max()) + 1, ds.n_classes if ds.n_classes else 0)
        return ds.input_dim, ds.n_classes

    def model_spec(self) -> ModelSpec:
        d_in, d_out = self._dims()
        return ModelSpec(self.model.kind, d_in, d_out, self.model.hidden_dim, self.seed, self.model.bias)

    def load_data(self) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        ds = self.dataset
        if ds.csv_path is not None:
            x, y = _csv_dataset(ds.csv_path)
        else:
            spec = data_mod.DatasetSpec(
                ds.n_samples, ds.input_dim, ds.n_classes, ds.cluster_spread, self.heterogeneity, self.data_seed
            )
            x, y = data_mod.generate_dataset(spec)
        return data_mod.split_holdout(x, y, ds.holdout, self.data_seed)

    def train_size(self) -> int:
        ds = self.dataset
        n = len(_csv_dataset(ds.csv_path)[1]) if ds.csv_path is not None else ds.n_samples
        return n - int(round(ds.holdout * n))

    def steps_per_epoch(self) -> int:
        n_train = self.train_size()
        shard = n_train if self.data_mode == "replicated" else n_train // self.n_workers
        return shard // self.batch_size

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved document; ``parse_config(cfg.to_dict()) == cfg``."""
        return {
            "strategy": self.strategy.value,
            "n_workers": self.n_workers,
            "torus_dims": list(self.torus_dims) if self.torus_dims else None,
            "k0": self.k0,
            "gamma_k": self.gamma_k,
            "k_min": self.k_min,
            "update_order": self.update_order.value,
            "model": self.model.to_dict(),
            "dataset": self.dataset.to_dict(),
            "schedule": self.schedule.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "heterogeneity": self.heterogeneity,
            "data_mode": self.data_mode,
            "parallelism": self.parallelism,
            "run_id": self.run_id,
            "out": self.out,
            "emit": list(self.emit),
        }

    def output_dir(self) -> Path:
        root = self.out or os.environ.get(OUTPUT_ENV) or "runs"
        return Path(root)


@dataclass(frozen=True)
class SweepConfig:
    """A base cell crossed with strategy, worker-count and seed axes.

    Cells that share a seed share the dataset, so strategies are compared on
    identical data.
    """

    base: ExperimentConfig
    strategies: tuple[StrategyKind, ...]
    n_workers: tuple[int, ...]
    seeds: tuple[int, ...]

    def cells(self) -> list[ExperimentConfig]:
        out = []
        for n, seed, strategy in itertools.product(self.n_workers, self.seeds, self.strategies):
            raw = self.base.to_dict()
            raw.update(strategy=strategy.value, n_workers=n, seed=seed, run_id=None)
            if self.base.dataset.seed is None:
                raw["dataset"]["seed"] = None
            out.append(parse_config(raw))
        return out

    def groups(self) -> list[tuple[dict[str, int], list[ExperimentConfig]]]:
        """Cells grouped by (n_workers, seed), in enumeration order."""
        cells = self.cells()
        out = []
        per = len(self.strategies)
        for g in range(0, len(cells), per):
            chunk = cells[g : g + per]
            out.append(({"n_workers": chunk[0].n_workers, "seed": chunk[0].seed}, chunk))
        return out

    def to_dict(self) -> dict[str, Any]:
        raw = self.base.to_dict()
        raw["sweep"] = {
            "strategies": [s.value for s in self.strategies],
            "n_workers": list(self.n_workers),
            "seeds": list(self.seeds),
        }
        return raw


def load_document(path: str | Path) -> dict[str, Any]:
    """Read a JSON or TOML document (by suffix; JSON otherwise)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"{path}:{m.group(1) if m else 1}: invalid TOML: {exc}") from None
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a table/object")
    return doc


def _sub(raw: Any, cls: type, key: str) -> Any:
    if raw is None:
        return cls()
    if isinstance(raw, (ModelConfig, DatasetConfig)):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{key} must be a table", key=key)
    known = set(cls.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {key} key(s): {', '.join(sorted(unknown))}", key=sorted(unknown)[0])
    try:
        if cls is ModelConfig:
            return ModelConfig(ModelKind(raw.get("kind", "linear")), raw.get("hidden_dim"), bool(raw.get("bias", True)))
        return cls(**raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}", key=key) from None


def _schedule(raw: Any, epochs: int) -> LRSchedule:
    if raw is None:
        return LRSchedule.constant(0.1)
    if isinstance(raw, LRSchedule):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError("schedule must be a table", key="schedule")
    try:
        return LRSchedule.from_dict(raw, epochs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"schedule: {exc}", key="schedule") from None


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    """Validate a config mapping (without a ``sweep`` table)."""
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        first = sorted(unknown)[0]
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}", key=first)
    raw = {k: v for k, v in raw.items() if v is not None}
    topology = raw.pop("topology", None)
    strategy = StrategyKind.parse(raw.pop("strategy", "D_ring"), topology)
    epochs = raw.get("epochs", 20)
    try:
        kwargs: dict[str, Any] = dict(raw)
        kwargs["model"] = _sub(raw.get("model"), ModelConfig, "model")
        kwargs["dataset"] = _sub(raw.get("dataset"), DatasetConfig, "dataset")
        kwargs["schedule"] = _schedule(raw.get("schedule"), epochs if isinstance(epochs, int) else None)
        if "torus_dims" in raw:
            dims = raw["torus_dims"]
            if not (isinstance(dims, (list, tuple)) and len(dims) == 2):
                raise ConfigError("torus_dims must be [rows, cols]", key="torus_dims")
            kwargs["torus_dims"] = (int(dims[0]), int(dims[1]))
        if "emit" in raw:
            emit = raw["emit"]
            kwargs["emit"] = (emit,) if isinstance(emit, str) else tuple(emit)
        if "update_order" in raw:
            try:
                kwargs["update_order"] = UpdateOrder(str(raw["update_order"]).lower().replace("-", "_"))
            except ValueError:
                raise ConfigError(
                    f"update_order must be one of {[u.value for u in UpdateOrder]}", key="update_order"
                ) from None
        if "heterogeneity" in raw:
            kwargs["heterogeneity"] = float(raw["heterogeneity"])
        if "gamma_k" in raw:
            kwargs["gamma_k"] = float(raw["gamma_k"])
        return ExperimentConfig(strategy=strategy, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def parse_document(raw: dict[str, Any]) -> ExperimentConfig | SweepConfig:
    raw = dict(raw)
    sweep = raw.pop("sweep", None)
    if sweep is None:
        return parse_config(raw)
    if not isinstance(sweep, dict):
        raise ConfigError("sweep must be a table", key="sweep")
    unknown = set(sweep) - {"strategies", "n_workers", "seeds"}
    if unknown:
        raise ConfigError(f"unknown sweep key(s): {', '.join(sorted(unknown))}", key=sorted(unknown)[0])
    base = parse_config(raw)
    strategies = tuple(StrategyKind.parse(s) for s in sweep.get("strategies", [base.strategy.value]))
    n_workers = tuple(int(n) for n in sweep.get("n_workers", [base.n_workers]))
    seeds = tuple(int(s) for s in sweep.get("seeds", [base.seed]))
    if not strategies or not n_workers or not seeds:
        raise ConfigError("sweep axes must be non-empty", key="sweep")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("sweep strategies must be distinct", key="strategies")
    cfg = SweepConfig(base, strategies, n_workers, seeds)
    cfg.cells()  # validate every cell before any compute
    return cfg


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig | SweepConfig:
    raw = load_document(path)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_document(raw)
