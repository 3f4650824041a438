"""Learning-rate schedules and the adaptive ring-lattice degree rule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any

from gossipsim.errors import ConfigError

__all__ = [
    "ScheduleKind",
    "Scaling",
    "LRPoint",
    "Phase",
    "LRSchedule",
    "AdaParams",
    "effective_lr",
    "scale_factor",
    "ada_degree",
]


class ScheduleKind(str, enum.Enum):
    CONSTANT = "constant"
    WARMUP_MULTISTEP = "warmup_multistep"
    ONE_CYCLE = "one_cycle"


class Scaling(str, enum.Enum):
    NONE = "none"
    LINEAR = "linear"
    SQRT = "sqrt"


@dataclass(frozen=True)
class LRPoint:
    """``base_lr * factor``, multiplied by the scale factor when ``scaled``."""

    factor: float
    scaled: bool = False


@dataclass(frozen=True)
class Phase:
    """Linear ramp from ``start_lr`` at epoch ``start`` towards ``end_lr`` at ``end`` (exclusive)."""

    start: int
    end: int
    start_lr: LRPoint
    end_lr: LRPoint


def _const(factor: float, scaled: bool = True) -> tuple[LRPoint, LRPoint]:
    return LRPoint(factor, scaled), LRPoint(factor, scaled)


def _stretch(bounds: list[float], epochs: int) -> list[int]:
    # milestone fractions of a reference run mapped onto `epochs`, each phase >= 1 epoch
    cuts = [0]
    for b in bounds[1:-1]:
        cuts.append(max(cuts[-1] + 1, int(round(b * epochs))))
    cuts.append(max(cuts[-1] + 1, epochs))
    return cuts


@dataclass(frozen=True)
class LRSchedule:
    kind: ScheduleKind = ScheduleKind.CONSTANT
    base_lr: float = 0.1
    scaling: Scaling = Scaling.NONE
    phases: tuple[Phase, ...] = field(default_factory=tuple)
    reference_batch: int = 256

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "scaling", Scaling(self.scaling))
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive", key="schedule")
        if self.reference_batch < 1:
            raise ConfigError("reference_batch must be >= 1", key="schedule")
        if self.kind is ScheduleKind.CONSTANT:
            return
        if not self.phases:
            raise ConfigError(f"{self.kind.value} schedule needs a phase table", key="schedule")
        prev_end = self.phases[0].start
        for ph in self.phases:
            if ph.start != prev_end or ph.end <= ph.start:
                raise ConfigError(
                    f"schedule phases must be contiguous and ordered; bad phase [{ph.start}, {ph.end})",
                    key="schedule",
                )
            if not (ph.start_lr.factor > 0 and ph.end_lr.factor > 0):
                raise ConfigError("schedule learning rates must stay positive", key="schedule")
            prev_end = ph.end

    @classmethod
    def constant(cls, base_lr: float, scaling: Scaling | str = Scaling.NONE) -> LRSchedule:
        return cls(ScheduleKind.CONSTANT, base_lr, Scaling(scaling))

    @classmethod
    def warmup_multistep(
        cls,
        base_lr: float,
        epochs: int = 90,
        scaling: Scaling | str = Scaling.LINEAR,
        reference_batch: int = 256,
    ) -> LRSchedule:
        """Warmup from ``base_lr`` to ``base_lr*s``, then /10 and /100 steps.

        Milestones sit at 5/90, 30/90 and 60/90 of the run.
        """
        c = _stretch([0, 5 / 90, 30 / 90, 60 / 90, 1.0], epochs)
        phases = (
            Phase(c[0], c[1], LRPoint(1.0, False), LRPoint(1.0, True)),
            Phase(c[1], c[2], *_const(1.0)),
            Phase(c[2], c[3], *_const(0.1)),
            Phase(c[3], c[4], *_const(0.01)),
        )
        return cls(ScheduleKind.WARMUP_MULTISTEP, base_lr, Scaling(scaling), phases, reference_batch)

    @classmethod
    def one_cycle(
        cls,
        base_lr: float,
        epochs: int = 300,
        scaling: Scaling | str = Scaling.NONE,
        reference_batch: int = 256,
    ) -> LRSchedule:
        """Ramp ``base_lr -> 20*base_lr*s -> base_lr*s -> 0.1*base_lr*s``.

        Phase boundaries at 23/300 and 46/300 of the run.
        """
        c = _stretch([0, 23 / 300, 46 / 300, 1.0], epochs)
        phases = (
            Phase(c[0], c[1], LRPoint(1.0, False), LRPoint(20.0, True)),
            Phase(c[1], c[2], LRPoint(20.0, True), LRPoint(1.0, True)),
            Phase(c[2], c[3], LRPoint(1.0, True), LRPoint(0.1, True)),
        )
        return cls(ScheduleKind.ONE_CYCLE, base_lr, Scaling(scaling), phases, reference_batch)

    @property
    def epoch_range(self) -> tuple[int, int] | None:
        if self.kind is ScheduleKind.CONSTANT:
            return None
        return self.phases[0].start, self.phases[-1].end

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "base_lr": self.base_lr,
            "scaling": self.scaling.value,
            "reference_batch": self.reference_batch,
            "phases": [
                [p.start, p.end, [p.start_lr.factor, p.start_lr.scaled], [p.end_lr.factor, p.end_lr.scaled]]
                for p in self.phases
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any], epochs: int | None = None) -> LRSchedule:
        raw = dict(raw)
        known = {"kind", "base_lr", "scaling", "reference_batch", "phases"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown schedule key(s): {', '.join(sorted(unknown))}", key="schedule")
        try:
            kind = ScheduleKind(raw.get("kind", "constant"))
            scaling = Scaling(raw.get("scaling", "none"))
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}", key="schedule") from None
        base_lr = float(raw.get("base_lr", 0.1))
        ref = int(raw.get("reference_batch", 256))
        phases = raw.get("phases")
        if kind is ScheduleKind.CONSTANT:
            return cls(kind, base_lr, scaling, (), ref)
        if phases is None:
            if kind is ScheduleKind.WARMUP_MULTISTEP:
                return cls.warmup_multistep(base_lr, epochs or 90, scaling, ref)
            return cls.one_cycle(base_lr, epochs or 300, scaling, ref)
        try:
            parsed = tuple(
                Phase(int(s), int(e), LRPoint(float(a[0]), bool(a[1])), LRPoint(float(b[0]), bool(b[1])))
                for s, e, a, b in phases
            )
        except (TypeError, ValueError, IndexError):
            raise ConfigError(
                "schedule phases must be [start, end, [factor, scaled], [factor, scaled]]",
                key="schedule",
            ) from None
        return cls(kind, base_lr, scaling, parsed, ref)


def scale_factor(sched: LRSchedule, batch_size: int, degree: int) -> float:
    """``batch_size * (degree + 1) / reference_batch`` under the schedule's scaling rule."""
    s = batch_size * (degree + 1) / sched.reference_batch
    if sched.scaling is Scaling.LINEAR:
        return s
    if sched.scaling is Scaling.SQRT:
        return math.sqrt(s)
    return 1.0


def effective_lr(sched: LRSchedule, epoch: int, batch_size: int, degree: int) -> float:
    mult = scale_factor(sched, batch_size, degree)
    if sched.kind is ScheduleKind.CONSTANT:
        return sched.base_lr * mult
    for ph in sched.phases:
        if ph.start <= epoch < ph.end:
            lo = sched.base_lr * ph.start_lr.factor * (mult if ph.start_lr.scaled else 1.0)
            hi = sched.base_lr * ph.end_lr.factor * (mult if ph.end_lr.scaled else 1.0)
            if lo == hi:
                return lo
            return lo + (hi - lo) * (epoch - ph.start) / (ph.end - ph.start)
    start, end = sched.epoch_range  # type: ignore[misc]
    raise ConfigError(f"epoch {epoch} is outside the schedule's phase table [{start}, {end})", key="schedule")


@dataclass(frozen=True)
class AdaParams:
    k0: int
    gamma_k: float
    k_min: int = 2

    def __post_init__(self) -> None:
        if self.k_min < 1:
            raise ConfigError("k_min must be >= 1", key="k_min")
        if self.k0 < self.k_min:
            raise ConfigError(f"k0 ({self.k0}) must be >= k_min ({self.k_min})", key="k0")
        if not self.gamma_k > 0:
            raise ConfigError("gamma_k must be positive", key="gamma_k")

    @classmethod
    def per_worker_count(cls, n_workers: int, k_min: int = 2) -> AdaParams:
        """Alternate preset ``k = max(n_workers // 9 - epoch, k_min)``."""
        return cls(n_workers // 9, 1.0, k_min)

    def check_workers(self, n: int) -> None:
        if 2 * self.k0 > n - 1:
            raise ConfigError(
                f"k0={self.k0} needs 2*k0 <= n_workers-1 (n_workers={n})", key="k0"
            )


def ada_degree(p: AdaParams, epoch: int) -> int:
    """Coordination number for ``epoch``: ``max(k0 - int(gamma_k * epoch), k_min)``."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return max(p.k0 - int(p.gamma_k * epoch), p.k_min)
