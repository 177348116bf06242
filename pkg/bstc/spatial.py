from collections import deque
from dataclasses import dataclass

import numpy as np
from loguru import logger

from bstc.constant import DataError
from bstc.data import AdjacencyGraph


@dataclass(frozen=True, eq=False)
class BandedSPD:
    """Symmetric banded matrix (or its lower Cholesky factor) in LAPACK lower band storage.

    ``bands[k, j]`` holds ``A[j + k, j]`` for ``k = 0..bandwidth``; entries of the last
    ``k`` columns of row ``k`` are padding.
    """

    n: int
    bandwidth: int
    bands: np.ndarray
    is_factor: bool = False

    def __post_init__(self):
        bands = np.array(self.bands, dtype=float)
        if bands.shape != (self.bandwidth + 1, self.n):
            raise DataError(
                "Band storage has the wrong shape",
                {"Expected": (self.bandwidth + 1, self.n), "Got": bands.shape},
            )
        for k in range(1, self.bandwidth + 1):
            bands[k, self.n - k:] = 0.0
        bands.setflags(write=False)
        object.__setattr__(self, "bands", bands)

    @classmethod
    def from_dense(cls, a, bandwidth=None, is_factor=False, tol=0.0) -> "BandedSPD":
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        if bandwidth is None:
            lower = np.tril(a, -1)
            rows, cols = np.nonzero(np.abs(lower) > tol)
            bandwidth = int((rows - cols).max()) if rows.size else 0
        bands = np.zeros((bandwidth + 1, n))
        for k in range(bandwidth + 1):
            bands[k, : n - k] = np.diagonal(a, -k)
        return cls(n, bandwidth, bands, is_factor)

    @classmethod
    def identity(cls, n: int) -> "BandedSPD":
        return cls(n, 0, np.ones((1, n)))

    def diagonal(self) -> np.ndarray:
        return self.bands[0].copy()

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        idx = np.arange(self.n)
        for k in range(self.bandwidth + 1):
            a[idx[k:], idx[: self.n - k]] = self.bands[k, : self.n - k]
            if not self.is_factor and k > 0:
                a[idx[: self.n - k], idx[k:]] = self.bands[k, : self.n - k]
        return a

    def row(self, i: int) -> np.ndarray:
        out = np.zeros(self.n)
        for k in range(self.bandwidth + 1):
            if i - k >= 0:
                out[i - k] = self.bands[k, i - k]
            if not self.is_factor and k > 0 and i + k < self.n:
                out[i + k] = self.bands[k, i]
        return out

    def dot(self, v) -> np.ndarray:
        """Matrix product with a vector or with the columns of a matrix."""
        v = np.asarray(v, dtype=float)
        col = (slice(None),) + (None,) * (v.ndim - 1)
        out = self.bands[0][col] * v
        n = self.n
        for k in range(1, self.bandwidth + 1):
            band = self.bands[k, : n - k][col]
            out[k:] += band * v[: n - k]
            if not self.is_factor:
                out[: n - k] += band * v[k:]
        return out

    def quad(self, v) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.sum(v * self.dot(v)))

    def scale(self, c: float) -> "BandedSPD":
        return BandedSPD(self.n, self.bandwidth, c * self.bands, self.is_factor)

    def add_diagonal(self, d) -> "BandedSPD":
        bands = self.bands.copy()
        bands[0] += d
        return BandedSPD(self.n, self.bandwidth, bands, self.is_factor)

    def congruence(self, d) -> "BandedSPD":
        """diag(d) A diag(d), same band."""
        d = np.asarray(d, dtype=float)
        bands = self.bands.copy()
        for k in range(self.bandwidth + 1):
            bands[k, : self.n - k] *= d[k:] * d[: self.n - k]
        return BandedSPD(self.n, self.bandwidth, bands, self.is_factor)

    def __add__(self, other: "BandedSPD") -> "BandedSPD":
        if not isinstance(other, BandedSPD):
            return NotImplemented
        if other.n != self.n or self.is_factor or other.is_factor:
            raise DataError("Incompatible banded matrices", {"n": (self.n, other.n)})
        b = max(self.bandwidth, other.bandwidth)
        bands = np.zeros((b + 1, self.n))
        bands[: self.bandwidth + 1] += self.bands
        bands[: other.bandwidth + 1] += other.bands
        return BandedSPD(self.n, b, bands)


def reverse_cuthill_mckee(graph: AdjacencyGraph) -> np.ndarray:
    """Reverse Cuthill-McKee ordering of the graph.

    Each component starts from its minimum-degree node (lowest index on ties); the
    unvisited neighbours of a node are queued by ascending degree, then index. If
    the reordering would widen the band the identity is returned instead.
    """
    n = graph.n
    if not graph.edges:
        return np.arange(n)

    degree = graph.neighbor_counts
    adj = graph.neighbors()
    seeds = sorted(range(n), key=lambda i: (degree[i], i))
    visited = np.zeros(n, dtype=bool)
    order = []

    for seed in seeds:
        if visited[seed]:
            continue
        visited[seed] = True
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            order.append(i)
            fresh = [j for j in adj[i] if not visited[j]]
            fresh.sort(key=lambda j: (degree[j], j))
            for j in fresh:
                visited[j] = True
                queue.append(j)

    perm = np.array(order[::-1], dtype=int)
    before = graph.bandwidth(np.arange(n))
    after = graph.bandwidth(perm)
    if after > before:
        logger.debug(f"RCM bandwidth {after} exceeds natural bandwidth {before}, keeping identity")
        return np.arange(n)
    logger.debug(f"RCM reduced bandwidth from {before} to {after}")
    return perm


def reorder(graph: AdjacencyGraph) -> AdjacencyGraph:
    return graph.with_permutation(reverse_cuthill_mckee(graph))


def leroux_precision(rho: float, graph: AdjacencyGraph) -> BandedSPD:
    """Q(rho, W) = rho (diag(W 1) - W) + (1 - rho) I in the graph's band ordering."""
    if rho == 1.0:
        raise DataError("singular ICAR precision", {"rho": rho})
    if not 0.0 <= rho < 1.0:
        raise DataError("rho must lie in [0, 1)", {"rho": rho})

    pos = graph.position
    b = graph.bandwidth()
    bands = np.zeros((b + 1, graph.n))
    bands[0, pos] = rho * graph.neighbor_counts + (1.0 - rho)
    for i, j in graph.edges:
        lo, hi = max(pos[i], pos[j]), min(pos[i], pos[j])
        bands[lo - hi, hi] = -rho
    return BandedSPD(graph.n, b, bands)
