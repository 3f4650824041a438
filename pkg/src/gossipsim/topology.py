"""Communication graphs, their mixing matrices and spectral diagnostics.

Five graph families are supported:

- ``ring``: node ``i`` talks to ``i-1`` and ``i+1``.
- ``torus``: a wrapped ``r x c`` grid, four neighbors per node.
- ``ring_lattice``: node ``i`` talks to every node within ring distance ``k``.
- ``exponential``: directed; node ``i`` sends to ``(i + 2**m) % n``.
- ``complete``: everyone talks to everyone.

Nodes are 0-indexed. Every mixing matrix uses the uniform rule
``1 / (degree + 1)`` on the node itself and each of its neighbors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np

from gossipsim.errors import ConfigError, NumericalError

__all__ = [
    "TopologyKind",
    "Topology",
    "MixingMatrix",
    "SpectralReport",
    "build_topology",
    "exponential_neighbors",
    "mixing_matrix",
    "spectral_report",
    "edge_count",
    "expected_degree",
    "expected_edge_count",
    "default_torus_dims",
]


class TopologyKind(str, enum.Enum):
    RING = "ring"
    TORUS = "torus"
    RING_LATTICE = "ring_lattice"
    EXPONENTIAL = "exponential"
    COMPLETE = "complete"

    @classmethod
    def parse(cls, value: str | TopologyKind) -> TopologyKind:
        if isinstance(value, TopologyKind):
            return value
        key = str(value).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"lattice": "ring_lattice", "ringlattice": "ring_lattice", "exp": "exponential"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown topology {value!r}; expected one of: {choices}") from None


@dataclass(frozen=True)
class Topology:
    """A named communication graph over ``n`` workers.

    ``neighbors[i]`` never contains ``i``. For undirected kinds the relation
    is symmetric; for ``exponential`` the lists are out-neighbors.
    """

    kind: TopologyKind
    n: int
    neighbors: tuple[tuple[int, ...], ...]
    directed: bool = False
    k: int | None = None
    dims: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if len(self.neighbors) != self.n:
            raise ConfigError(f"expected {self.n} neighbor lists, got {len(self.neighbors)}")
        for i, nbrs in enumerate(self.neighbors):
            if len(set(nbrs)) != len(nbrs):
                raise ConfigError(f"node {i} has duplicate neighbors {nbrs}")
            for j in nbrs:
                if not 0 <= j < self.n or j == i:
                    raise ConfigError(f"node {i} has invalid neighbor {j}")
        if not self.directed:
            for i, nbrs in enumerate(self.neighbors):
                for j in nbrs:
                    if i not in self.neighbors[j]:
                        raise ConfigError(f"undirected topology is asymmetric at ({i}, {j})")

    def degree(self, node: int) -> int:
        return len(self.neighbors[node])

    @property
    def degrees(self) -> list[int]:
        return [len(nbrs) for nbrs in self.neighbors]

    @property
    def max_degree(self) -> int:
        return max(self.degrees, default=0)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind.value,
            "n": self.n,
            "directed": self.directed,
            "neighbors": [list(nbrs) for nbrs in self.neighbors],
            "edges": edge_count(self),
        }
        if self.k is not None:
            out["k"] = self.k
        if self.dims is not None:
            out["dims"] = list(self.dims)
        return out


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    """Row-stochastic ``n x n`` averaging weights.

    ``rows`` caches the sparse form used by the engine: for every node, the
    ascending column indices with a positive weight and those weights.
    """

    n: int
    weights: np.ndarray
    rows: tuple[tuple[np.ndarray, np.ndarray], ...] = field(repr=False)

    @classmethod
    def from_dense(cls, weights: np.ndarray) -> MixingMatrix:
        w = np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigError(f"mixing matrix must be square, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("mixing matrix entries must be finite and nonnegative")
        if np.max(np.abs(w.sum(axis=1) - 1.0), initial=0.0) > 1e-12:
            raise ConfigError("mixing matrix rows must sum to 1")
        w.setflags(write=False)
        rows = []
        for i in range(w.shape[0]):
            idx = np.flatnonzero(w[i] > 0)
            vals = w[i, idx].copy()
            idx.setflags(write=False)
            vals.setflags(write=False)
            rows.append((idx, vals))
        return cls(n=w.shape[0], weights=w, rows=tuple(rows))

    @cached_property
    def offdiag_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(index, weight)`` tables of each row's off-diagonal entries.

        Rows are ascending by column; short rows are padded with the row's
        own index at weight 0.
        """
        width = max((len(idx) - (i in idx) for i, (idx, _) in enumerate(self.rows)), default=0)
        idx_tab = np.tile(np.arange(self.n)[:, None], (1, width))
        w_tab = np.zeros((self.n, width))
        for i, (idx, vals) in enumerate(self.rows):
            keep = idx != i
            k = int(keep.sum())
            idx_tab[i, :k] = idx[keep]
            w_tab[i, :k] = vals[keep]
        idx_tab.setflags(write=False)
        w_tab.setflags(write=False)
        return idx_tab, w_tab

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "weights": self.weights.tolist()}


@dataclass(frozen=True)
class SpectralReport:
    second_eigenvalue_modulus: float
    spectral_gap: float

    def to_dict(self) -> dict[str, float]:
        return {
            "second_eigenvalue_modulus": self.second_eigenvalue_modulus,
            "spectral_gap": self.spectral_gap,
        }


def _ring_distance(i: int, j: int, n: int) -> int:
    d = abs(i - j) % n
    return min(d, n - d)


def _sorted_by_ring_distance(i: int, nbrs: set[int], n: int) -> tuple[int, ...]:
    return tuple(sorted(nbrs, key=lambda j: (_ring_distance(i, j, n), j)))


def default_torus_dims(n: int) -> tuple[int, int]:
    """Most-square factorization ``r x c = n`` with ``3 <= r <= c``."""
    for r in range(math.isqrt(n), 2, -1):
        if n % r == 0 and n // r >= 3:
            return r, n // r
    raise ConfigError(f"torus needs n = r*c with r >= 3 and c >= 3; n={n} has no such factorization")


def exponential_neighbors(i: int, n: int) -> list[int]:
    """Out-neighbors ``(i + 2**m) % n`` for ``m = 0 .. floor(log2(n-1))``.

    Self-hits and repeats (possible only for very small ``n``) are dropped;
    order follows ``m``.
    """
    if n < 3:
        raise ConfigError(f"exponential graph needs n >= 3, got n={n}")
    if not 0 <= i < n:
        raise ConfigError(f"node index {i} outside [0, {n})")
    out: list[int] = []
    for m in range((n - 1).bit_length()):
        j = (i + (1 << m)) % n
        if j != i and j not in out:
            out.append(j)
    return out


def build_topology(
    kind: str | TopologyKind,
    n: int,
    k: int | None = None,
    torus_dims: tuple[int, int] | None = None,
) -> Topology:
    """Construct one of the five graph families over ``n`` nodes.

    ``complete`` also accepts ``n`` of 1 or 2 (degenerate single-worker and
    pair runs); every other kind needs ``n >= 3``.
    """
    kind = TopologyKind.parse(kind)
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise ConfigError(f"n must be an integer, got {n!r}", key="n_workers")
    n = int(n)
    min_n = 1 if kind is TopologyKind.COMPLETE else 3
    if n < min_n:
        raise ConfigError(f"{kind.value} topology needs n >= {min_n}, got n={n}", key="n_workers")

    if kind is TopologyKind.RING:
        nbrs = [_sorted_by_ring_distance(i, {(i - 1) % n, (i + 1) % n}, n) for i in range(n)]
        return Topology(kind, n, tuple(nbrs))

    if kind is TopologyKind.RING_LATTICE:
        if k is None:
            raise ConfigError("ring_lattice topology needs a coordination number k", key="k")
        if not 1 <= k or 2 * k > n - 1:
            raise ConfigError(
                f"ring_lattice needs 1 <= k <= (n-1)/2; got k={k}, n={n}", key="k"
            )
        nbrs = []
        for i in range(n):
            ring = {(i + d) % n for d in range(1, k + 1)} | {(i - d) % n for d in range(1, k + 1)}
            nbrs.append(_sorted_by_ring_distance(i, ring, n))
        return Topology(kind, n, tuple(nbrs), k=k)

    if kind is TopologyKind.TORUS:
        if torus_dims is None:
            r, c = default_torus_dims(n)
        else:
            r, c = (int(x) for x in torus_dims)
            if r * c != n or r < 3 or c < 3:
                raise ConfigError(
                    f"torus dims must satisfy r*c = n with r, c >= 3; got {r}x{c} for n={n}",
                    key="torus_dims",
                )
        nbrs = []
        for i in range(n):
            row, col = divmod(i, c)
            around = {
                ((row - 1) % r) * c + col,
                ((row + 1) % r) * c + col,
                row * c + (col - 1) % c,
                row * c + (col + 1) % c,
            }
            nbrs.append(tuple(sorted(around)))
        return Topology(kind, n, tuple(nbrs), dims=(r, c))

    if kind is TopologyKind.EXPONENTIAL:
        nbrs = [tuple(exponential_neighbors(i, n)) for i in range(n)]
        return Topology(kind, n, tuple(nbrs), directed=True)

    nbrs = [_sorted_by_ring_distance(i, set(range(n)) - {i}, n) for i in range(n)]
    return Topology(TopologyKind.COMPLETE, n, tuple(nbrs))


def expected_degree(kind: str | TopologyKind, n: int, k: int | None = None) -> int:
    """Closed-form node degree of each graph family."""
    kind = TopologyKind.parse(kind)
    if kind is TopologyKind.RING:
        return 2
    if kind is TopologyKind.TORUS:
        return 4
    if kind is TopologyKind.RING_LATTICE:
        if k is None:
            raise ConfigError("ring_lattice degree needs k", key="k")
        return 2 * k
    if kind is TopologyKind.EXPONENTIAL:
        return math.floor(math.log2(n - 1)) + 1
    return n - 1


def expected_edge_count(kind: str | TopologyKind, n: int, k: int | None = None) -> int:
    """Closed-form edge count (arc count for the directed exponential graph)."""
    kind = TopologyKind.parse(kind)
    if kind is TopologyKind.RING:
        return n
    if kind is TopologyKind.TORUS:
        return 2 * n
    if kind is TopologyKind.RING_LATTICE:
        if k is None:
            raise ConfigError("ring_lattice edge count needs k", key="k")
        return k * n
    if kind is TopologyKind.EXPONENTIAL:
        return n * (math.floor(math.log2(n - 1)) + 1)
    return n * (n - 1) // 2


def edge_count(t: Topology) -> int:
    arcs = sum(len(nbrs) for nbrs in t.neighbors)
    return arcs if t.directed else arcs // 2


def mixing_matrix(t: Topology) -> MixingMatrix:
    w = np.zeros((t.n, t.n), dtype=np.float64)
    for i, nbrs in enumerate(t.neighbors):
        share = 1.0 / (len(nbrs) + 1)
        w[i, i] = share
        for j in nbrs:
            w[i, j] = share
    return MixingMatrix.from_dense(w)


def spectral_report(m: MixingMatrix) -> SpectralReport:
    """Second-largest eigenvalue modulus of the mixing matrix and its gap."""
    if m.n == 1:
        return SpectralReport(0.0, 1.0)
    try:
        if m.is_symmetric:
            eig = np.linalg.eigvalsh(m.weights)
        else:
            eig = np.linalg.eigvals(m.weights)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver did not converge for {m.n}x{m.n} matrix: {exc}") from exc
    moduli = np.sort(np.abs(eig))[::-1]
    second = float(min(max(moduli[1], 0.0), 1.0))
    # eigensolver noise on exact zeros (e.g. rank-1 uniform averaging)
    if second < 1e-12:
        second = 0.0
    return SpectralReport(second, 1.0 - second)
