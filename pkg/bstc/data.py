import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from loguru import logger

from bstc.constant import DataError


@dataclass(frozen=True, eq=False)
class PanelData:
    """Areal panel: response y (I x T) and predictors x (I x T x (p+1)).

    Column 0 of the predictor array is the intercept.
    """

    unit_ids: list
    times: list
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if y.ndim != 2 or x.ndim != 3:
            raise DataError("y must be I x T and x must be I x T x (p+1)")
        if y.shape != x.shape[:2]:
            raise DataError("Dimension mismatch", {"y": y.shape, "x": x.shape})
        if y.shape[0] < 1 or y.shape[1] < 1 or x.shape[2] < 1:
            raise DataError("Empty panel", {"Shape": x.shape})
        if len(self.unit_ids) != y.shape[0] or len(self.times) != y.shape[1]:
            raise DataError(
                "Labels do not match the panel",
                {"Units": len(self.unit_ids), "Times": len(self.times)},
            )
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise DataError("Missing cell in panel")
        if not np.all(x[:, :, 0] == 1.0):
            raise DataError("Column 0 of x must be the intercept")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "unit_ids", list(self.unit_ids))
        object.__setattr__(self, "times", list(self.times))

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_times(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2] - 1

    def permuted(self, order) -> "PanelData":
        order = np.asarray(order)
        return PanelData(
            [self.unit_ids[k] for k in order], self.times, self.y[order], self.x[order]
        )

    def head(self, n_times: int) -> "PanelData":
        """Keep the first `n_times` time points."""
        if not 1 <= n_times <= self.n_times:
            raise DataError("Invalid number of time points", {"T": n_times})
        return PanelData(
            self.unit_ids, self.times[:n_times], self.y[:, :n_times], self.x[:, :n_times]
        )


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Symmetric 0/1 neighbour structure over n units.

    `permutation[k]` is the unit placed at position k of the band ordering.
    """

    n: int
    edges: frozenset
    neighbor_counts: np.ndarray = field(default=None)
    permutation: np.ndarray = field(default=None)
    unit_ids: Optional[list] = None

    def __post_init__(self):
        if self.n < 1:
            raise DataError("Graph needs at least one unit", {"n": self.n})
        edges = set()
        for i, j in self.edges:
            if i == j:
                raise DataError("self-loop", {"Unit": i})
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise DataError("Edge outside the graph", {"Edge": (i, j)})
            edges.add((min(i, j), max(i, j)))
        counts = np.zeros(self.n, dtype=int)
        for i, j in edges:
            counts[i] += 1
            counts[j] += 1
        if self.permutation is None:
            perm = np.arange(self.n)
        else:
            perm = np.asarray(self.permutation, dtype=int)
            if perm.shape != (self.n,) or not np.array_equal(np.sort(perm), np.arange(self.n)):
                raise DataError("permutation is not a bijection on the units")
        object.__setattr__(self, "edges", frozenset(edges))
        object.__setattr__(self, "neighbor_counts", counts)
        object.__setattr__(self, "permutation", perm)

    @property
    def position(self) -> np.ndarray:
        """Inverse permutation: position of each unit in the band ordering."""
        pos = np.empty(self.n, dtype=int)
        pos[self.permutation] = np.arange(self.n)
        return pos

    def edge_array(self) -> np.ndarray:
        if not self.edges:
            return np.zeros((0, 2), dtype=int)
        return np.array(sorted(self.edges), dtype=int)

    def neighbors(self) -> list:
        adj = [[] for _ in range(self.n)]
        for i, j in sorted(self.edges):
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def dense(self) -> np.ndarray:
        w = np.zeros((self.n, self.n))
        e = self.edge_array()
        if len(e):
            w[e[:, 0], e[:, 1]] = 1.0
            w[e[:, 1], e[:, 0]] = 1.0
        return w

    def bandwidth(self, order=None) -> int:
        """Half-bandwidth of W under `order` (defaults to the graph's permutation)."""
        if not self.edges:
            return 0
        order = self.permutation if order is None else np.asarray(order)
        pos = np.empty(self.n, dtype=int)
        pos[order] = np.arange(self.n)
        e = self.edge_array()
        return int(np.abs(pos[e[:, 0]] - pos[e[:, 1]]).max())

    def with_permutation(self, perm) -> "AdjacencyGraph":
        return AdjacencyGraph(self.n, self.edges, permutation=perm, unit_ids=self.unit_ids)

    def relabeled(self) -> "AdjacencyGraph":
        """The same graph with units renumbered into band order (identity permutation)."""
        pos = self.position
        edges = frozenset((pos[i], pos[j]) for i, j in self.edges)
        ids = None if self.unit_ids is None else [self.unit_ids[k] for k in self.permutation]
        return AdjacencyGraph(self.n, edges, unit_ids=ids)


@dataclass(frozen=True, eq=False)
class Scaling:
    """Overall means and sample sds (denominator I*T - 1) used by `standardize`."""

    y_mean: float
    y_sd: float
    x_mean: np.ndarray
    x_sd: np.ndarray

    def unstandardize(self, data: PanelData) -> PanelData:
        x = data.x.copy()
        x[:, :, 1:] = x[:, :, 1:] * self.x_sd + self.x_mean
        return PanelData(data.unit_ids, data.times, data.y * self.y_sd + self.y_mean, x)

    def to_items(self) -> dict:
        return {
            "y_mean": repr(float(self.y_mean)),
            "y_sd": repr(float(self.y_sd)),
            "x_mean": ",".join(repr(float(v)) for v in self.x_mean),
            "x_sd": ",".join(repr(float(v)) for v in self.x_sd),
        }


def _read_csv(path, **kwargs) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise DataError("File does not exist", {"File": path})
    try:
        df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip", **kwargs)
    except pd.errors.EmptyDataError:
        raise DataError("empty file", {"File": path})
    if df.empty:
        raise DataError("empty file", {"File": path})
    return df


def load_panel(path, schema: Optional[dict] = None) -> PanelData:
    """Read a long-format panel CSV (`unit,time,y,x1,...,xp`).

    `schema` may rename the columns: keys `unit`, `time`, `response`, `predictors`.
    Units keep their order of first appearance, times are sorted ascending and the
    intercept column is prepended to the predictors.
    """
    schema = dict(schema or {})
    unit_col = schema.get("unit", "unit")
    time_col = schema.get("time", "time")
    y_col = schema.get("response", "y")

    df = _read_csv(path, dtype={unit_col: str})
    for col in (unit_col, time_col, y_col):
        if col not in df.columns:
            raise DataError("Missing column", {"Column": col, "File": path})
    predictors = schema.get("predictors")
    if predictors is None:
        predictors = [c for c in df.columns if c not in (unit_col, time_col, y_col)]
    for col in predictors:
        if col not in df.columns:
            raise DataError("Missing column", {"Column": col, "File": path})

    values = df[[y_col] + list(predictors)]
    for col in values.columns:
        converted = pd.to_numeric(values[col], errors="coerce")
        bad = converted.isna() & values[col].notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DataError("non-numeric field", {"Column": col, "Line": row})
        if converted.isna().any():
            row = int(np.flatnonzero(converted.isna().to_numpy())[0]) + 2
            raise DataError("missing cell", {"Column": col, "Line": row})
        df[col] = converted.astype(float)

    keys = df[[unit_col, time_col]]
    dup = keys.duplicated()
    if dup.any():
        row = df.loc[dup].iloc[0]
        raise DataError(
            "duplicate (unit,time) row", {"Unit": row[unit_col], "Time": row[time_col]}
        )

    unit_ids = list(pd.unique(df[unit_col]))
    times = sorted(pd.unique(df[time_col]).tolist())
    if len(df) != len(unit_ids) * len(times):
        raise DataError(
            "incomplete panel",
            {"Rows": len(df), "Units": len(unit_ids), "Times": len(times)},
        )

    unit_pos = {u: k for k, u in enumerate(unit_ids)}
    time_pos = {t: k for k, t in enumerate(times)}
    rows = df[unit_col].map(unit_pos).to_numpy()
    cols = df[time_col].map(time_pos).to_numpy()

    n_pred = len(predictors)
    y = np.empty((len(unit_ids), len(times)))
    x = np.ones((len(unit_ids), len(times), n_pred + 1))
    y[rows, cols] = df[y_col].to_numpy()
    if n_pred:
        x[rows, cols, 1:] = df[list(predictors)].to_numpy()

    logger.info(
        f"Loaded panel {path}: I={len(unit_ids)}, T={len(times)}, p={n_pred}"
    )
    return PanelData(unit_ids, times, y, x)


def load_adjacency(path, unit_ids: list) -> AdjacencyGraph:
    """Read an edge list CSV with header `unit_a,unit_b` onto the panel's unit order."""
    df = _read_csv(path, dtype=str)
    for col in ("unit_a", "unit_b"):
        if col not in df.columns:
            raise DataError("Missing column", {"Column": col, "File": path})

    index = {str(u): k for k, u in enumerate(unit_ids)}
    edges = set()
    duplicates = 0
    for line, (a, b) in enumerate(zip(df["unit_a"], df["unit_b"]), start=2):
        a, b = str(a).strip(), str(b).strip()
        for u in (a, b):
            if u not in index:
                raise DataError("unknown unit id", {"Unit": u, "Line": line})
        if a == b:
            raise DataError("self-loop", {"Unit": a, "Line": line})
        e = (min(index[a], index[b]), max(index[a], index[b]))
        if e in edges:
            duplicates += 1
        edges.add(e)

    if duplicates:
        logger.warning(f"Ignored {duplicates} duplicate edge(s) in {path}")
    graph = AdjacencyGraph(len(unit_ids), frozenset(edges), unit_ids=list(unit_ids))
    logger.info(f"Loaded adjacency {path}: n={graph.n}, edges={len(graph.edges)}")
    return graph


def standardize(data: PanelData):
    """Centre and scale y and every non-intercept predictor over all I*T cells.

    The sample standard deviation uses denominator I*T - 1.
    Returns the standardized panel and the `Scaling` needed to undo it.
    """
    n_cells = data.n_units * data.n_times

    def _moments(values, name):
        if n_cells < 2:
            raise DataError("zero variance", {"Variable": name})
        mean = values.mean()
        sd = values.std(ddof=1)
        if not sd > 0:
            raise DataError("zero variance", {"Variable": name})
        return mean, sd

    y_mean, y_sd = _moments(data.y, "y")
    x_mean = np.zeros(data.p)
    x_sd = np.ones(data.p)
    for k in range(data.p):
        x_mean[k], x_sd[k] = _moments(data.x[:, :, k + 1], f"x{k + 1}")

    x = data.x.copy()
    x[:, :, 1:] = (x[:, :, 1:] - x_mean) / x_sd
    scaled = PanelData(data.unit_ids, data.times, (data.y - y_mean) / y_sd, x)
    return scaled, Scaling(y_mean, y_sd, x_mean, x_sd)


def _deviations(values, graph: AdjacencyGraph):
    y = np.asarray(values, dtype=float)
    if y.ndim != 1 or y.size != graph.n:
        raise DataError("Values do not match the graph", {"Values": y.shape, "n": graph.n})
    if y.size < 2:
        raise DataError("Need at least two units")
    if not graph.edges:
        raise DataError("empty graph")
    z = y - y.mean()
    z2ss = (z * z).sum()
    if np.ptp(y) == 0 or z2ss == 0:
        raise DataError("constant input")
    return y, z, z2ss


def morans_i(values, graph: AdjacencyGraph) -> float:
    """Global Moran's I with binary symmetric weights."""
    y, z, z2ss = _deviations(values, graph)
    e = graph.edge_array()
    s0 = 2.0 * len(e)
    inum = 2.0 * (z[e[:, 0]] * z[e[:, 1]]).sum()
    return float(y.size / s0 * inum / z2ss)


def gearys_c(values, graph: AdjacencyGraph) -> float:
    """Global Geary's C with binary symmetric weights."""
    y, z, z2ss = _deviations(values, graph)
    e = graph.edge_array()
    s0 = 2.0 * len(e)
    num = 2.0 * ((y[e[:, 0]] - y[e[:, 1]]) ** 2).sum()
    return float((y.size - 1) / (2.0 * s0) * num / z2ss)


def autocorrelation_table(data: PanelData, graph: AdjacencyGraph) -> pd.DataFrame:
    """Moran's I and Geary's C of the time-averaged response and of every year."""
    rows = [("average", data.y.mean(axis=1))]
    rows += [(t, data.y[:, k]) for k, t in enumerate(data.times)]
    out = []
    for label, values in rows:
        try:
            out.append({"time": label, "morans_i": morans_i(values, graph), "gearys_c": gearys_c(values, graph)})
        except DataError as e:
            logger.warning(f"Skipping {label}: {e}")
    return pd.DataFrame(out, columns=["time", "morans_i", "gearys_c"])
