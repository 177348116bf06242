"""Metropolis-within-Gibbs sampler for the clustered spatio-temporal CAR model.

A chain runs in the bandwidth-reducing unit order of the adjacency graph; draws
are mapped back to the caller's unit order before they are recorded.
"""
import concurrent.futures
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import beta as beta_dist, invgamma

from bstc.cache import LRUCache
from bstc.config import BaseMeasure, ChainConfig
from bstc.constant import ConfigError, DataError, NumericalError, PartitionError
from bstc.data import AdjacencyGraph, PanelData
from bstc.dp_cluster import (
    AdaptiveStep,
    ClusterState,
    canonicalize,
    draw_polya_urn,
    gibbs_allocations,
    update_cluster_betas,
    update_cluster_xis,
    update_concentration,
)
from bstc.gmrf import (
    band_cholesky,
    fitted_values,
    logdet,
    random_effects_full_conditional,
    sample_block_tridiagonal,
    sample_var_prior,
    var_quadratic_form,
)
from bstc.spatial import BandedSPD, leroux_precision, reorder


@dataclass(eq=False)
class ModelState:
    cluster: ClusterState
    w: np.ndarray
    sigma2: float
    tau2: float
    rho: float

    @property
    def xi_units(self) -> np.ndarray:
        return self.cluster.xis[self.cluster.s]

    @property
    def unit_betas(self) -> np.ndarray:
        return self.cluster.betas[self.cluster.s]

    def check(self):
        self.cluster.check()
        if not (self.sigma2 > 0 and self.tau2 > 0 and 0 < self.rho < 1 and self.cluster.alpha > 0):
            raise NumericalError(
                "Parameter left its support",
                {"sigma2": self.sigma2, "tau2": self.tau2, "rho": self.rho, "alpha": self.cluster.alpha},
            )
        if not np.isfinite(self.w).all():
            raise NumericalError("Non-finite random effects")
        return self


@dataclass(eq=False)
class ChainOutput:
    """Stored post-burn-in draws, in the caller's unit order.

    Labels in `s` are canonical and 0-based; `unit_betas` and `unit_xis` hold the
    cluster values expanded to the units.
    """

    unit_ids: list
    times: list
    s: np.ndarray
    unit_betas: np.ndarray
    unit_xis: np.ndarray
    w: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    k: np.ndarray
    loglik: np.ndarray
    acceptance: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.s.shape[0]

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def p(self) -> int:
        return self.unit_betas.shape[2] - 1

    def partitions(self) -> list:
        return [row for row in self.s]

    def __add__(self, other: "ChainOutput") -> "ChainOutput":
        if not isinstance(other, ChainOutput):
            return NotImplemented
        if self.unit_ids != other.unit_ids or list(self.times) != list(other.times) or self.p != other.p:
            raise DataError("Cannot merge chains over different panels")
        n1, n2 = self.n_draws, other.n_draws
        acceptance = {}
        for key in set(self.acceptance) | set(other.acceptance):
            a, b = self.acceptance.get(key, np.nan), other.acceptance.get(key, np.nan)
            acceptance[key] = float(np.nansum([a * n1, b * n2]) / max(n1 + n2, 1))
        cat = lambda name: np.concatenate([getattr(self, name), getattr(other, name)])
        return ChainOutput(
            self.unit_ids,
            self.times,
            cat("s"),
            cat("unit_betas"),
            cat("unit_xis"),
            cat("w"),
            cat("sigma2"),
            cat("tau2"),
            cat("rho"),
            cat("alpha"),
            cat("k"),
            cat("loglik"),
            acceptance,
            dict(self.config),
            {**self.extra, "chains": int(self.extra.get("chains", 1)) + int(other.extra.get("chains", 1))},
        )


class PrecisionCache:
    """Q(rho, W) with its log-determinant, memoized on rho."""

    def __init__(self, graph: AdjacencyGraph, capacity: int = 8):
        self.graph = graph
        self.cache = LRUCache(capacity)

    def _compute(self, rho: float):
        Q = leroux_precision(rho, self.graph)
        return Q, logdet(band_cholesky(Q))

    def get(self, rho: float):
        return self.cache.get_or_compute(float(rho), lambda: self._compute(rho))


def sigma2_posterior(state: ModelState, data: PanelData, prior):
    a, b = prior
    resid = data.y - fitted_values(data.x, state.unit_betas) - state.w
    return a + 0.5 * data.y.size, b + 0.5 * float(np.sum(resid ** 2))


def update_sigma2(state: ModelState, data: PanelData, prior, rng: np.random.Generator) -> float:
    shape, scale = sigma2_posterior(state, data, prior)
    return float(invgamma.rvs(shape, scale=scale, random_state=rng))


def tau2_posterior(state: ModelState, Q: BandedSPD, prior):
    a, b = prior
    return a + 0.5 * state.w.size, b + 0.5 * var_quadratic_form(state.w, state.xi_units, Q)


def update_tau2(state: ModelState, Q: BandedSPD, prior, rng: np.random.Generator) -> float:
    shape, scale = tau2_posterior(state, Q, prior)
    return float(invgamma.rvs(shape, scale=scale, random_state=rng))


def rho_log_target(rho: float, state: ModelState, precisions: PrecisionCache, prior, prior_only: bool = False) -> float:
    """log Beta(rho) + T/2 log|Q(rho)| - quadratic form / (2 tau2), on the rho scale."""
    lp = float(beta_dist(*prior).logpdf(rho))
    if prior_only:
        return lp
    Q, ld = precisions.get(rho)
    T = state.w.shape[1]
    return lp + 0.5 * T * ld - 0.5 * var_quadratic_form(state.w, state.xi_units, Q) / state.tau2


def update_rho(
    state: ModelState,
    graph: AdjacencyGraph,
    prior,
    step: float,
    rng: np.random.Generator,
    precisions: Optional[PrecisionCache] = None,
    prior_only: bool = False,
):
    """Random-walk Metropolis on logit(rho). Returns (rho, accepted)."""
    if precisions is None:
        precisions = PrecisionCache(graph)
    rho = state.rho
    z = np.log(rho) - np.log1p(-rho)
    proposal = float(1.0 / (1.0 + np.exp(-(z + step * rng.standard_normal()))))
    if not 0.0 < proposal < 1.0:
        return rho, 0
    log_ratio = (
        rho_log_target(proposal, state, precisions, prior, prior_only)
        - rho_log_target(rho, state, precisions, prior, prior_only)
        # logit Jacobian: d rho / dz = rho (1 - rho)
        + np.log(proposal) + np.log1p(-proposal)
        - np.log(rho) - np.log1p(-rho)
    )
    if np.log(rng.random()) < log_ratio:
        return proposal, 1
    return rho, 0


def unit_loglik(state: ModelState, data: PanelData) -> np.ndarray:
    """log N_T(y_i | X_i beta_i + w_i, sigma2 I) for every unit."""
    resid = data.y - fitted_values(data.x, state.unit_betas) - state.w
    return -0.5 * np.sum(resid ** 2, axis=1) / state.sigma2 - 0.5 * data.n_times * np.log(
        2 * np.pi * state.sigma2
    )


def draw_response(state: ModelState, data: PanelData, rng: np.random.Generator) -> PanelData:
    """y ~ N(fitted + w, sigma2) with the predictors of `data`."""
    mean = fitted_values(data.x, state.unit_betas) + state.w
    y = mean + np.sqrt(state.sigma2) * rng.standard_normal(mean.shape)
    return PanelData(data.unit_ids, data.times, y, data.x)


def initial_state(
    data: PanelData,
    precisions: PrecisionCache,
    config: ChainConfig,
    base: BaseMeasure,
    rng: np.random.Generator,
    fixed: Optional[np.ndarray] = None,
) -> ModelState:
    n, T = data.n_units, data.n_times
    if config.init == "prior":
        alpha = float(rng.gamma(config.a_alpha, 1.0 / config.b_alpha))
        s = draw_polya_urn(n, alpha, rng) if fixed is None else fixed.copy()
        betas, xis = base.draw(rng, int(s.max()) + 1)
        sigma2 = float(invgamma.rvs(config.a_sigma2, scale=config.b_sigma2, random_state=rng))
        tau2 = float(invgamma.rvs(config.a_tau2, scale=config.b_tau2, random_state=rng))
        rho = float(np.clip(rng.beta(config.a_rho, config.b_rho), 1e-6, 1 - 1e-6))
        Q, _ = precisions.get(rho)
        w = sample_var_prior(xis[s], tau2, Q, T, rng)
        return ModelState(ClusterState(s, betas, xis, alpha), w, sigma2, tau2, rho)

    s = np.zeros(n, dtype=int) if fixed is None else fixed.copy()
    k = int(s.max()) + 1
    betas, _ = base.draw(rng, k)
    return ModelState(ClusterState(s, betas, np.zeros(k), 1.0), np.zeros((n, T)), 1.0, 1.0, 0.9)


def sweep(
    state: ModelState,
    data: PanelData,
    graph: AdjacencyGraph,
    precisions: PrecisionCache,
    config: ChainConfig,
    base: BaseMeasure,
    steps: dict,
    rng: np.random.Generator,
    adapt: bool = False,
    fixed: bool = False,
    order=None,
) -> ModelState:
    """One full iteration: allocations, beta*, xi*, alpha, w, sigma2, tau2, rho."""
    Q, _ = precisions.get(state.rho)

    if not fixed:
        state.cluster = gibbs_allocations(state, data, Q, base, config.n_aux, rng, order=order)
    state.cluster.betas = update_cluster_betas(state, data, state.sigma2, base, rng)
    xis, accepted = update_cluster_xis(state, state.w, state.tau2, Q, base, steps["xi"].step, rng)
    state.cluster.xis = xis
    steps["xi"].record(accepted, state.cluster.k, adapt)
    state.cluster.alpha = update_concentration(
        state.cluster.alpha, state.cluster.k, data.n_units, (config.a_alpha, config.b_alpha), rng
    )

    psi, c = random_effects_full_conditional(state, data, Q)
    state.w = sample_block_tridiagonal(psi, c, rng).w

    state.sigma2 = update_sigma2(state, data, (config.a_sigma2, config.b_sigma2), rng)
    state.tau2 = update_tau2(state, Q, (config.a_tau2, config.b_tau2), rng)
    state.rho, accepted = update_rho(
        state, graph, (config.a_rho, config.b_rho), steps["rho"].step, rng, precisions
    )
    steps["rho"].record(accepted, 1, adapt)
    return state


def _fixed_labels(config: ChainConfig, n: int) -> Optional[np.ndarray]:
    if config.fixed_partition is None:
        return None
    labels = np.asarray(config.fixed_partition, dtype=int)
    if labels.shape != (n,):
        raise PartitionError(
            "Fixed partition does not cover the units", {"Labels": labels.size, "Units": n}
        )
    return canonicalize(labels)[0]


def run_chain(data: PanelData, graph: AdjacencyGraph, config: ChainConfig, chain_index: int = 0) -> ChainOutput:
    config.validate()
    if graph.n != data.n_units:
        raise DataError("Graph and panel disagree", {"Graph": graph.n, "Panel": data.n_units})
    fixed = _fixed_labels(config, data.n_units)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
    ordered = reorder(graph)
    perm = ordered.permutation
    pos = ordered.position
    work_data = data.permuted(perm)
    work_graph = ordered.relabeled()
    work_fixed = None if fixed is None else canonicalize(fixed[perm])[0]

    base = config.base_measure(data.p)
    precisions = PrecisionCache(work_graph)
    state = initial_state(work_data, precisions, config, base, rng, work_fixed)
    steps = {"xi": AdaptiveStep(config.mh_step_xi), "rho": AdaptiveStep(config.mh_step_rho)}

    n_draws = config.n_draws
    I, T, dim = data.n_units, data.n_times, data.p + 1
    out_s = np.empty((n_draws, I), dtype=int)
    out_b = np.empty((n_draws, I, dim))
    out_x = np.empty((n_draws, I))
    out_w = np.empty((n_draws, I, T))
    scalars = np.empty((n_draws, 5))
    out_ll = np.empty((n_draws, I))

    logger.info(
        f"Chain {chain_index}: I={I}, T={T}, p={data.p}, bandwidth {graph.bandwidth(np.arange(I))} -> "
        f"{work_graph.bandwidth()}, {config.iterations} iterations, {n_draws} draws"
    )
    m = 0
    for it in range(1, config.iterations + 1):
        adapt = config.adapt and it <= config.burn_in
        try:
            state = sweep(
                state, work_data, work_graph, precisions, config, base, steps, rng, adapt, fixed is not None, pos
            )
            state.check()
        except NumericalError as e:
            raise NumericalError(e.msg, {**e.other, "Iteration": it, "Chain": chain_index})

        if it == config.burn_in:
            for step in steps.values():
                step.reset()
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0 and m < n_draws:
            ll = unit_loglik(state, work_data)
            if not np.isfinite(ll).all():
                raise NumericalError("Non-finite log-likelihood", {"Iteration": it, "Chain": chain_index})
            s, _ = canonicalize(state.cluster.s[pos])
            out_s[m] = s
            out_b[m] = state.unit_betas[pos]
            out_x[m] = state.xi_units[pos]
            out_w[m] = state.w[pos]
            scalars[m] = (state.sigma2, state.tau2, state.rho, state.cluster.alpha, state.cluster.k)
            out_ll[m] = ll[pos]
            m += 1

        if config.log_every and it % config.log_every == 0:
            logger.info(
                f"Chain {chain_index} iteration {it}: K={state.cluster.k}, sigma2={state.sigma2:.4g}, "
                f"tau2={state.tau2:.4g}, rho={state.rho:.4g}, alpha={state.cluster.alpha:.4g}, "
                f"acc(xi)={steps['xi'].rate:.2f}, acc(rho)={steps['rho'].rate:.2f}"
            )

    logger.info(f"Chain {chain_index} done, step sizes xi={steps['xi'].step:.3g}, rho={steps['rho'].step:.3g}")
    return ChainOutput(
        list(data.unit_ids),
        list(data.times),
        out_s,
        out_b,
        out_x,
        out_w,
        scalars[:, 0].copy(),
        scalars[:, 1].copy(),
        scalars[:, 2].copy(),
        scalars[:, 3].copy(),
        scalars[:, 4].astype(int),
        out_ll,
        {"xi": steps["xi"].rate, "rho": steps["rho"].rate},
        config.to_items(),
        {"chains": 1},
    )


def run_conditional_on_partition(data: PanelData, graph: AdjacencyGraph, config: ChainConfig, chain_index: int = 0) -> ChainOutput:
    """Re-run the chain with the allocations pinned to `config.fixed_partition`."""
    if config.fixed_partition is None:
        raise ConfigError("No fixed partition given", {"Key": "fixed_partition"})
    return run_chain(data, graph, config, chain_index)


def run_chains(data: PanelData, graph: AdjacencyGraph, config: ChainConfig) -> ChainOutput:
    """Run `n_chains` independent chains, merged in chain-index order."""
    config.validate()
    if config.n_chains == 1:
        return run_chain(data, graph, config)

    workers = min(config.workers, config.n_chains)
    logger.info(f"Running {config.n_chains} chains on {workers} process(es)")
    if workers == 1:
        results = [(n, run_chain(data, graph, config, n)) for n in range(config.n_chains)]
    else:
        futures = []
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            for n in range(config.n_chains):
                futures.append((n, executor.submit(run_chain, data, graph, config, n)))
        results = sorted(((n, f.result()) for n, f in futures), key=lambda x: x[0])

    out = results[0][1]
    for _, chain in results[1:]:
        out = out + chain
    return out


def posterior_cluster_summary(output: ChainOutput, level: float = 0.95) -> pd.DataFrame:
    """Posterior means and equal-tailed intervals of beta* and xi* for a fixed-partition run."""
    s = output.s
    if output.n_draws == 0:
        raise PartitionError("No draws to summarize")
    if not np.all(s == s[0]):
        raise PartitionError("Draws do not share one partition")
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    rows = []
    for j in range(int(s[0].max()) + 1):
        units = np.flatnonzero(s[0] == j)
        u = units[0]
        series = {f"beta_{k}": output.unit_betas[:, u, k] for k in range(output.p + 1)}
        series["xi"] = output.unit_xis[:, u]
        for name, draws in series.items():
            rows.append(
                {
                    "cluster": j + 1,
                    "size": units.size,
                    "parameter": name,
                    "mean": float(draws.mean()),
                    "lower": float(np.quantile(draws, lo)),
                    "upper": float(np.quantile(draws, hi)),
                }
            )
    return pd.DataFrame(rows, columns=["cluster", "size", "parameter", "mean", "lower", "upper"])
