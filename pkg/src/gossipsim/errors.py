"""Exception hierarchy shared by every gossipsim module."""

from __future__ import annotations


class GossipSimError(Exception):
    """Base class for all errors raised by gossipsim."""


class ConfigError(GossipSimError, ValueError):
    """An input violates a documented constraint.

    ``key`` names the offending configuration key when one is known, so the
    CLI can anchor the message to a line of the config file.
    """

    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class NumericalError(GossipSimError, ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class DivergenceError(NumericalError):
    """Training produced a non-finite parameter or loss."""

    def __init__(
        self,
        message: str,
        *,
        strategy: str | None = None,
        epoch: int | None = None,
        iteration: int | None = None,
    ) -> None:
        self.reason = message
        self.strategy = strategy
        self.epoch = epoch
        self.iteration = iteration
        ctx = ", ".join(
            f"{name}={value}"
            for name, value in (("strategy", strategy), ("epoch", epoch), ("iteration", iteration))
            if value is not None
        )
        super().__init__(f"{message} ({ctx})" if ctx else message)

    def with_context(self, **context: object) -> DivergenceError:
        merged = {
            "strategy": self.strategy,
            "epoch": self.epoch,
            "iteration": self.iteration,
        }
        merged.update({k: v for k, v in context.items() if v is not None})
        return DivergenceError(self.reason, **merged)  # type: ignore[arg-type]


class AlignmentError(GossipSimError, ValueError):
    """Metric streams that must share iterations do not."""
