"""Point estimates and diagnostics for posterior partition draws.

Labels are 0-based and canonical (first-occurrence order); partition CSV files
use 1-based cluster numbers.
"""
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from loguru import logger

from bstc.constant import DataError, PartitionError
from bstc.data import _read_csv
from bstc.dp_cluster import canonicalize

TIE_TOL = 1e-10
EXHAUSTIVE_MAX_N = 10


@dataclass(frozen=True, eq=False)
class Partition:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise PartitionError("Partition needs a non-empty label vector")
        labels = canonicalize(labels)[0]
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def k(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def n(self) -> int:
        return self.labels.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels)

    def same(self, other: "Partition") -> bool:
        return np.array_equal(self.labels, other.labels)


def _labels(p) -> np.ndarray:
    return p.labels if isinstance(p, Partition) else Partition(p).labels


def _draw_matrix(draws) -> np.ndarray:
    rows = list(draws)
    if not rows:
        raise PartitionError("empty draw list")
    mat = np.array([_labels(r) for r in rows], dtype=int)
    if mat.ndim != 2:
        raise PartitionError("Draws have different lengths")
    return mat


def _unique_draws(mat: np.ndarray):
    unique, counts = np.unique(mat, axis=0, return_counts=True)
    return unique, counts / counts.sum()


def set_partitions(n: int):
    """Every canonical partition of n items as a restricted growth string (Bell(n) of them)."""
    if n < 1:
        return
    labels = [0] * n
    maxima = [0] * n

    def grow(i):
        if i == n:
            yield np.array(labels, dtype=int)
            return
        for v in range(maxima[i - 1] + 2):
            labels[i] = v
            maxima[i] = max(maxima[i - 1], v)
            yield from grow(i + 1)

    yield from grow(1)


def posterior_similarity_matrix(draws, chunk: int = 256) -> np.ndarray:
    """S_ij = fraction of draws with s_i = s_j."""
    mat = _draw_matrix(draws)
    m, n = mat.shape
    S = np.zeros((n, n))
    for start in range(0, m, chunk):
        block = mat[start:start + chunk]
        S += (block[:, :, None] == block[:, None, :]).sum(axis=0)
    return S / m


def _check_costs(a: float, b: float):
    if not (a > 0 and b > 0):
        raise DataError("Misclassification costs must be positive", {"a": a, "b": b})


def binder_objective(S: np.ndarray, candidates, a: float, b: float) -> np.ndarray:
    """f(c) = sum_{i<j} 1{c_i = c_j} (S_ij - b/(a+b)) for one or many candidates."""
    c = np.atleast_2d(candidates)
    weight = np.triu(S - b / (a + b), 1)
    out = np.empty(c.shape[0])
    for start in range(0, c.shape[0], 4096):
        block = c[start:start + 4096]
        same = block[:, :, None] == block[:, None, :]
        out[start:start + 4096] = (same * weight).sum(axis=(1, 2))
    return out if np.ndim(candidates) == 2 else float(out[0])


def expected_binder_loss(S: np.ndarray, candidate, a: float, b: float) -> float:
    c = _labels(candidate)
    same = c[:, None] == c[None, :]
    iu = np.triu_indices(c.size, 1)
    S_u, same_u = S[iu], same[iu]
    return float(np.sum(a * S_u * ~same_u + b * (1.0 - S_u) * same_u))


def _entropy_rows(counts: np.ndarray, n: int) -> np.ndarray:
    p = counts / n
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=-1)


def partition_entropy(p) -> float:
    labels = _labels(p)
    return float(_entropy_rows(np.bincount(labels), labels.size))


def joint_entropy(p1, p2) -> float:
    l1, l2 = _labels(p1), _labels(p2)
    if l1.size != l2.size:
        raise PartitionError("Partitions have different lengths", {"n1": l1.size, "n2": l2.size})
    k2 = l2.max() + 1
    return float(_entropy_rows(np.bincount(l1 * k2 + l2), l1.size))


def _draw_entropies(mat: np.ndarray) -> np.ndarray:
    m, n = mat.shape
    width = int(mat.max()) + 1
    flat = (mat + width * np.arange(m)[:, None]).ravel()
    counts = np.bincount(flat, minlength=m * width).reshape(m, width)
    return _entropy_rows(counts, n)


def _joint_entropies(mat: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """H(C_m, candidate) for every draw row of `mat`."""
    m, n = mat.shape
    kc = int(candidate.max()) + 1
    width = (int(mat.max()) + 1) * kc
    joint = mat * kc + candidate[None, :] + width * np.arange(m)[:, None]
    counts = np.bincount(joint.ravel(), minlength=m * width).reshape(m, width)
    return _entropy_rows(counts, n)


def _joint_factor(a: float, b: float, joint_scale: str) -> float:
    if joint_scale == "sum":
        return a + b
    if joint_scale == "mean":
        return (a + b) / 2.0
    raise DataError("Unknown joint entropy scale", {"Scale": joint_scale})


class _GVIObjective:
    """Expected generalized variation of information over deduplicated draws."""

    def __init__(self, mat: np.ndarray, a: float, b: float, joint_scale: str = "sum"):
        self.unique, self.weights = _unique_draws(mat)
        self.a, self.b = a, b
        self.scale = _joint_factor(a, b, joint_scale)
        self.mean_draw_entropy = float(self.weights @ _draw_entropies(self.unique))

    def __call__(self, candidate: np.ndarray) -> float:
        n = candidate.size
        h_hat = float(_entropy_rows(np.bincount(candidate), n))
        h_joint = float(self.weights @ _joint_entropies(self.unique, candidate))
        return -self.a * self.mean_draw_entropy - self.b * h_hat + self.scale * h_joint


def expected_gvi_loss(draws, candidate, a: float, b: float, joint_scale: str = "sum") -> float:
    _check_costs(a, b)
    return _GVIObjective(_draw_matrix(draws), a, b, joint_scale)(_labels(candidate))


def _select(candidates: list, scores: np.ndarray, maximize: bool) -> int:
    """Best score; ties go to fewer clusters, then lexicographically smaller labels."""
    scores = np.asarray(scores, dtype=float)
    best = scores.max() if maximize else scores.min()
    tied = np.flatnonzero(np.abs(scores - best) <= TIE_TOL * max(1.0, abs(best)))
    return min(tied, key=lambda i: (int(candidates[i].max()), tuple(candidates[i])))


def _hill_climb(start: np.ndarray, gain_of_move, n: int) -> np.ndarray:
    """Single-unit reassignment until no move improves the objective."""
    labels = start.copy()
    improved = True
    while improved:
        improved = False
        for i in range(n):
            target, gain = gain_of_move(labels, i)
            if target is not None and gain > TIE_TOL:
                labels[i] = target
                labels = canonicalize(labels)[0]
                improved = True
    return labels


def minimize_binder(S: np.ndarray, draws, a: float = 1.0, b: float = 1.0) -> Partition:
    """Maximize f over the sampled partitions and a greedy refinement of the best one.

    All partitions are searched when n <= 10.
    """
    _check_costs(a, b)
    mat = _draw_matrix(draws)
    n = mat.shape[1]
    if n <= EXHAUSTIVE_MAX_N:
        candidates = np.array(list(set_partitions(n)))
        scores = binder_objective(S, candidates, a, b)
        return Partition(candidates[_select(list(candidates), scores, maximize=True)])

    unique, _ = _unique_draws(mat)
    scores = binder_objective(S, unique, a, b)
    best = unique[_select(list(unique), scores, maximize=True)]

    weight = S - b / (a + b)
    np.fill_diagonal(weight, 0.0)

    def gain_of_move(labels, i):
        k = labels.max() + 1
        sums = np.bincount(labels, weights=weight[i], minlength=k)
        current = sums[labels[i]]
        options = np.append(sums, 0.0)  # last entry: new singleton
        if np.sum(labels == labels[i]) == 1:
            options[-1] = -np.inf
        options[labels[i]] = -np.inf
        j = int(np.argmax(options))
        return j, options[j] - current

    refined = _hill_climb(best, gain_of_move, n)
    candidates = list(unique) + [refined]
    scores = np.append(scores, binder_objective(S, refined, a, b))
    choice = Partition(candidates[_select(candidates, scores, maximize=True)])
    logger.debug(f"Binder estimate: K={choice.k}, f={scores.max():.6g}")
    return choice


def minimize_gvi(draws, a: float = 1.0, b: float = 1.0, joint_scale: str = "sum") -> Partition:
    """Minimize the expected generalized variation of information (log base 2)."""
    _check_costs(a, b)
    mat = _draw_matrix(draws)
    n = mat.shape[1]
    objective = _GVIObjective(mat, a, b, joint_scale)

    if n <= EXHAUSTIVE_MAX_N:
        candidates = list(set_partitions(n))
        scores = np.array([objective(c) for c in candidates])
        return Partition(candidates[_select(candidates, scores, maximize=False)])

    candidates = list(objective.unique)
    scores = np.array([objective(c) for c in candidates])
    best = candidates[_select(candidates, scores, maximize=False)]

    def gain_of_move(labels, i):
        current = objective(labels)
        k = labels.max() + 1
        best_target, best_gain = None, 0.0
        alone = np.sum(labels == labels[i]) == 1
        for j in range(k + 1):
            if j == labels[i] or (j == k and alone):
                continue
            trial = labels.copy()
            trial[i] = j
            gain = current - objective(canonicalize(trial)[0])
            if gain > best_gain:
                best_target, best_gain = j, gain
        return best_target, best_gain

    refined = _hill_climb(best, gain_of_move, n)
    candidates.append(refined)
    scores = np.append(scores, objective(refined))
    return Partition(candidates[_select(candidates, scores, maximize=False)])


def rand_index(p1, p2) -> float:
    l1, l2 = _labels(p1), _labels(p2)
    if l1.size != l2.size:
        raise PartitionError("Partitions have different lengths", {"n1": l1.size, "n2": l2.size})
    n = l1.size
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    same1 = (l1[:, None] == l1[None, :])[iu]
    same2 = (l2[:, None] == l2[None, :])[iu]
    return float(np.mean(same1 == same2))


def entropy_diagnostics(draws, estimate, level: float = 0.95) -> dict:
    """Posterior mean and interval of the draws' entropy and of their joint entropy with `estimate`."""
    mat = _draw_matrix(draws)
    est = _labels(estimate)
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    out = {}
    for name, values in (
        ("entropy", _draw_entropies(mat)),
        ("joint_entropy", _joint_entropies(mat, est)),
    ):
        out[name] = {
            "mean": float(values.mean()),
            "lower": float(np.quantile(values, lo)),
            "upper": float(np.quantile(values, hi)),
        }
    return out


def loss_sensitivity(
    draws,
    costs: Iterable[float] = (0.5, 1.0, 2.0, 3.0, 5.0),
    reference: Optional[Partition] = None,
    joint_scale: str = "sum",
) -> pd.DataFrame:
    """K, expected loss and Rand index against `reference` for Binder and GVI estimates over a (b=1)."""
    mat = _draw_matrix(draws)
    S = posterior_similarity_matrix(mat)
    if reference is None:
        reference = minimize_binder(S, mat, 1.0, 1.0)
    rows = []
    for a in costs:
        est = minimize_binder(S, mat, a, 1.0)
        rows.append(
            {
                "loss": "binder",
                "a": a,
                "b": 1.0,
                "k": est.k,
                "expected_loss": expected_binder_loss(S, est, a, 1.0),
                "rand_index": rand_index(est, reference),
            }
        )
        est = minimize_gvi(mat, a, 1.0, joint_scale)
        rows.append(
            {
                "loss": "gvi",
                "a": a,
                "b": 1.0,
                "k": est.k,
                "expected_loss": expected_gvi_loss(mat, est, a, 1.0, joint_scale),
                "rand_index": rand_index(est, reference),
            }
        )
    return pd.DataFrame(rows, columns=["loss", "a", "b", "k", "expected_loss", "rand_index"])


def write_partition(path: str, unit_ids: list, partition) -> None:
    labels = _labels(partition)
    if len(unit_ids) != labels.size:
        raise PartitionError("Partition does not cover the units", {"Units": len(unit_ids), "Labels": labels.size})
    pd.DataFrame({"unit": [str(u) for u in unit_ids], "cluster": labels + 1}).to_csv(
        path, index=False, encoding="utf-8"
    )
    logger.info(f"Wrote partition with {labels.max() + 1} clusters to {path}")


def read_partition(path: str, unit_ids: list) -> Partition:
    """Read a `unit,cluster` CSV and order it along `unit_ids`."""
    df = _read_csv(path, dtype={"unit": str})
    for col in ("unit", "cluster"):
        if col not in df.columns:
            raise DataError("Missing column", {"Column": col, "File": path})
    clusters = pd.to_numeric(df["cluster"], errors="coerce")
    if clusters.isna().any() or not np.all(clusters == np.round(clusters)):
        row = int(np.flatnonzero((clusters.isna() | (clusters != np.round(clusters))).to_numpy())[0]) + 2
        raise DataError("non-integer cluster label", {"Line": row, "File": path})
    index = {str(u): k for k, u in enumerate(unit_ids)}
    labels = np.full(len(unit_ids), -1, dtype=int)
    for line, (u, c) in enumerate(zip(df["unit"], clusters), start=2):
        u = str(u).strip()
        if u not in index:
            raise DataError("unknown unit id", {"Unit": u, "Line": line})
        if labels[index[u]] != -1:
            raise DataError("duplicate unit", {"Unit": u, "Line": line})
        labels[index[u]] = int(c)
    missing = [unit_ids[k] for k in np.flatnonzero(labels == -1)]
    if missing:
        raise DataError("Partition misses units", {"Units": ",".join(str(u) for u in missing[:5])})
    return Partition(labels)
