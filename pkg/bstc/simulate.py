"""Synthetic panels from the generative model on a rook-adjacency grid."""
import concurrent.futures
import dataclasses
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from loguru import logger

from bstc.constant import DataError
from bstc.data import AdjacencyGraph, PanelData
from bstc.dp_cluster import ClusterState, canonicalize
from bstc.gmrf import fitted_values, sample_var_prior
from bstc.partition import write_partition
from bstc.sampler import ModelState
from bstc.spatial import leroux_precision

RESOURCE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources")
TILING_FILE = os.path.join(RESOURCE_DIR, "seven_region_tiling.csv")
DEFAULT_T = 13


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    """Grid design; `true_partition` labels the cells row-major."""

    grid_rows: int
    grid_cols: int
    true_partition: np.ndarray
    p: int = 3
    rho: float = 0.95
    sigma2: float = 1.0
    tau2: float = 1.0
    seed: int = 0
    beta_sd: float = 1.0
    covariate_sd: float = 1.0
    xi_low: float = 0.0
    xi_high: float = 1.0

    def __post_init__(self):
        labels = np.asarray(self.true_partition, dtype=int)
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise DataError("Grid needs at least one cell", {"Rows": self.grid_rows, "Cols": self.grid_cols})
        if labels.shape != (self.grid_rows * self.grid_cols,):
            raise DataError(
                "Partition does not cover the grid",
                {"Cells": self.grid_rows * self.grid_cols, "Labels": labels.size},
            )
        if self.p < 0:
            raise DataError("p must be non-negative", {"p": self.p})
        if not 0.0 <= self.rho < 1.0:
            raise DataError("rho must lie in [0, 1)", {"rho": self.rho})
        if self.sigma2 < 0 or not self.tau2 > 0:
            raise DataError("Invalid variances", {"sigma2": self.sigma2, "tau2": self.tau2})
        # xi ~ U[low, high), high may equal 1
        if not (-1.0 < self.xi_low <= self.xi_high <= 1.0 and self.xi_low < 1.0):
            raise DataError("xi range must lie inside (-1, 1)", {"Low": self.xi_low, "High": self.xi_high})
        object.__setattr__(self, "true_partition", canonicalize(labels)[0])

    @property
    def n_units(self) -> int:
        return self.grid_rows * self.grid_cols

    def replace(self, **changes) -> "SimulationSpec":
        return dataclasses.replace(self, **changes)


def grid_graph(rows: int, cols: int) -> AdjacencyGraph:
    """Rook adjacency with row-major unit ids `r<row>c<col>`."""
    edges = set()
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.add((i, i + 1))
            if r + 1 < rows:
                edges.add((i, i + cols))
    ids = [f"r{r}c{c}" for r in range(rows) for c in range(cols)]
    return AdjacencyGraph(rows * cols, frozenset(edges), unit_ids=ids)


def load_tiling(path: str = TILING_FILE):
    """Read a `row,col,cluster` tiling into (rows, cols, row-major labels)."""
    df = pd.read_csv(path)
    rows, cols = int(df["row"].max()) + 1, int(df["col"].max()) + 1
    if len(df) != rows * cols or df[["row", "col"]].duplicated().any():
        raise DataError("Tiling does not cover the grid", {"File": path})
    df = df.sort_values(["row", "col"])
    return rows, cols, df["cluster"].to_numpy(dtype=int)


def seven_region_spec(seed: int = 0) -> SimulationSpec:
    """10 x 10 grid with seven contiguous regions, p=3, rho=0.95, sigma2=tau2=1."""
    rows, cols, labels = load_tiling()
    return SimulationSpec(rows, cols, labels, seed=seed)


def simulate_dataset(spec: SimulationSpec, T: int = DEFAULT_T):
    """Returns (PanelData, AdjacencyGraph, ground-truth ModelState); deterministic given the seed."""
    if T < 1:
        raise DataError("T must be positive", {"T": T})
    rng = np.random.default_rng(spec.seed)
    graph = grid_graph(spec.grid_rows, spec.grid_cols)
    s = spec.true_partition
    k = int(s.max()) + 1
    I = spec.n_units

    betas = rng.normal(0.0, spec.beta_sd, size=(k, spec.p + 1))
    xis = rng.uniform(spec.xi_low, spec.xi_high, size=k)
    # covariates are shared by the units of a cluster
    x = np.ones((I, T, spec.p + 1))
    x[:, :, 1:] = rng.normal(0.0, spec.covariate_sd, size=(k, T, spec.p))[s]

    Q = leroux_precision(spec.rho, graph)
    w = sample_var_prior(xis[s], spec.tau2, Q, T, rng)
    y = fitted_values(x, betas[s]) + w + np.sqrt(spec.sigma2) * rng.standard_normal((I, T))

    data = PanelData(graph.unit_ids, list(range(1, T + 1)), y, x)
    truth = ModelState(ClusterState(s.copy(), betas, xis, float("nan")), w, spec.sigma2, spec.tau2, spec.rho)
    logger.debug(f"Simulated I={I}, T={T}, K={k}, seed={spec.seed}")
    return data, graph, truth


def simulate_replicates(spec: SimulationSpec, T: int, n: int, workers: int = 1) -> list:
    """`n` datasets with seeds spec.seed, spec.seed + 1, ..."""
    specs = [spec.replace(seed=spec.seed + r) for r in range(n)]
    if workers <= 1:
        return [simulate_dataset(s, T) for s in specs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(simulate_dataset, s, T) for s in specs]
    return [f.result() for f in futures]


def write_simulation(out_dir: str, data: PanelData, graph: AdjacencyGraph, truth: ModelState):
    """panel.csv, adjacency.csv, truth.csv and partition.csv in the formats the loaders read."""
    os.makedirs(out_dir, exist_ok=True)
    I, T, p = data.n_units, data.n_times, data.p
    ids = data.unit_ids

    panel = pd.DataFrame(
        {
            "unit": np.repeat(ids, T),
            "time": np.tile(data.times, I),
            "y": data.y.reshape(-1),
        }
    )
    for k in range(1, p + 1):
        panel[f"x{k}"] = data.x[:, :, k].reshape(-1)
    panel.to_csv(os.path.join(out_dir, "panel.csv"), index=False, float_format="%.17g")

    edges = graph.edge_array()
    pd.DataFrame({"unit_a": [ids[i] for i in edges[:, 0]], "unit_b": [ids[j] for j in edges[:, 1]]}).to_csv(
        os.path.join(out_dir, "adjacency.csv"), index=False
    )

    rows = []
    unit_betas = truth.unit_betas
    for i, u in enumerate(ids):
        for k in range(p + 1):
            rows.append(("beta", u, k, unit_betas[i, k]))
        rows.append(("xi", u, "", truth.xi_units[i]))
        for t, time in enumerate(data.times):
            rows.append(("w", u, time, truth.w[i, t]))
    for name in ("sigma2", "tau2", "rho"):
        rows.append((name, "", "", getattr(truth, name)))
    pd.DataFrame(rows, columns=["parameter", "unit", "component", "value"]).to_csv(
        os.path.join(out_dir, "truth.csv"), index=False, float_format="%.17g"
    )

    write_partition(os.path.join(out_dir, "partition.csv"), ids, truth.cluster.s)
    logger.info(f"Wrote simulated dataset to {out_dir}")
