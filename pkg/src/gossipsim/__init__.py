"""Deterministic simulator for centralized and decentralized data-parallel SGD."""

from gossipsim.errors import (
    AlignmentError,
    ConfigError,
    DivergenceError,
    GossipSimError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ConfigError",
    "DivergenceError",
    "GossipSimError",
    "NumericalError",
    "__version__",
]
