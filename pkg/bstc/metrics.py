"""Model comparison: WAIC, one-step-ahead predictive likelihoods and forecast errors."""
import concurrent.futures
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from bstc.cache import LRUCache
from bstc.config import ChainConfig
from bstc.constant import DataError
from bstc.data import AdjacencyGraph, PanelData
from bstc.gmrf import band_cholesky, solve_factor
from bstc.report import render
from bstc.sampler import ChainOutput, run_chains
from bstc.spatial import leroux_precision


@dataclass
class MetricReport:
    waic: Optional[float] = None
    lppd: Optional[float] = None
    p_waic: Optional[float] = None
    predictive: dict = field(default_factory=dict)
    rmse: dict = field(default_factory=dict)
    mae: dict = field(default_factory=dict)
    in_sample_rmse: Optional[float] = None
    in_sample_mae: Optional[float] = None

    @property
    def lml_sum(self) -> Optional[float]:
        return float(sum(self.predictive.values())) if self.predictive else None

    @property
    def avg_rmse(self) -> Optional[float]:
        return float(np.mean(list(self.rmse.values()))) if self.rmse else None

    @property
    def avg_mae(self) -> Optional[float]:
        return float(np.mean(list(self.mae.values()))) if self.mae else None

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name in ("waic", "lppd", "p_waic", "in_sample_rmse", "in_sample_mae"):
            if getattr(self, name) is not None:
                rows.append((name, "", getattr(self, name)))
        for name, values in (("predictive_loglik", self.predictive), ("rmse", self.rmse), ("mae", self.mae)):
            for year, value in values.items():
                rows.append((name, year, value))
        for name in ("lml_sum", "avg_rmse", "avg_mae"):
            if getattr(self, name) is not None:
                rows.append((name, "", getattr(self, name)))
        return pd.DataFrame(rows, columns=["metric", "year", "value"])


def waic(loglik):
    """Returns (waic, lppd, p_waic) for a draws x units log-likelihood matrix."""
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 2 or loglik.shape[0] < 1:
        raise DataError("Expected a draws x units matrix", {"Shape": loglik.shape})
    if not np.isfinite(loglik).all():
        raise DataError("Non-finite log-likelihood")
    m = loglik.shape[0]
    log_mean = logsumexp(loglik, axis=0) - np.log(m)
    lppd = float(log_mean.sum())
    p_waic = float(2.0 * np.sum(log_mean - loglik.mean(axis=0)))
    return -2.0 * (lppd - p_waic), lppd, p_waic


def point_errors(y, y_hat):
    """(RMSE, MAE) of a forecast."""
    err = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def _car_covariance(rho: float, graph: AdjacencyGraph) -> np.ndarray:
    """Q(rho)^-1 in unit order, whatever band ordering the graph carries."""
    factor = band_cholesky(leroux_precision(rho, graph))
    inv_l = solve_factor(factor, np.eye(graph.n))
    pos = graph.position
    return (inv_l.T @ inv_l)[np.ix_(pos, pos)]


def predictive_density(output: ChainOutput, graph: AdjacencyGraph, y_next, x_next):
    """log p(y_t | Y_1:t-1) and the point forecast, averaging the w_t-marginalized Gaussian over draws.

    `output` comes from a fit on the first t-1 years; `y_next` is I and `x_next` is I x (p+1).
    """
    y_next = np.asarray(y_next, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    w_last = output.w[:, :, -1]
    means = np.einsum("ik,mik->mi", x_next, output.unit_betas) + output.unit_xis * w_last
    terms = np.empty(output.n_draws)
    eye = np.eye(output.n_units)
    covariances = LRUCache(16)
    for m in range(output.n_draws):
        rho = float(output.rho[m])
        car = covariances.get_or_compute(rho, lambda: _car_covariance(rho, graph))
        cov = output.sigma2[m] * eye + output.tau2[m] * car
        terms[m] = multivariate_normal.logpdf(y_next, means[m], cov)
    return float(logsumexp(terms) - np.log(output.n_draws)), means.mean(axis=0)


def _check_t0(data: PanelData, t0: int):
    if not 2 <= t0 <= data.n_times:
        raise DataError("t0 out of range", {"t0": t0, "T": data.n_times})


def _forecast_year(data: PanelData, graph: AdjacencyGraph, config: ChainConfig, t: int):
    """Fit years 1..t-1 and score year t (1-based)."""
    logger.info(f"Refitting on {t - 1} year(s) to predict {data.times[t - 1]}")
    output = run_chains(data.head(t - 1), graph, config)
    y_t, x_t = data.y[:, t - 1], data.x[:, t - 1]
    logp, y_hat = predictive_density(output, graph, y_t, x_t)
    rmse, mae = point_errors(y_t, y_hat)
    return t, logp, rmse, mae


def _forecast_years(data, graph, config, t0):
    _check_t0(data, t0)
    years = list(range(t0, data.n_times + 1))
    workers = min(config.workers, len(years))
    if workers == 1:
        results = [_forecast_year(data, graph, config, t) for t in years]
    else:
        # chains inside a refit stay in the worker process
        inner = config.replace(workers=1)
        futures = []
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            for t in years:
                futures.append(executor.submit(_forecast_year, data, graph, inner, t))
        results = [f.result() for f in futures]
    return sorted(results, key=lambda r: r[0])


def one_step_predictive_loglik(data: PanelData, graph: AdjacencyGraph, config: ChainConfig, t0: int):
    """Per-year log p(Y_t | Y_1:t-1) for t = t0..T and their sum."""
    per_year = {data.times[t - 1]: logp for t, logp, _, _ in _forecast_years(data, graph, config, t0)}
    return per_year, float(sum(per_year.values()))


def forecast_error(data: PanelData, graph: AdjacencyGraph, config: ChainConfig, t0: int):
    """Per-year RMSE and MAE of one-year-ahead forecasts, with their averages."""
    results = _forecast_years(data, graph, config, t0)
    rmse = {data.times[t - 1]: r for t, _, r, _ in results}
    mae = {data.times[t - 1]: a for t, _, _, a in results}
    return rmse, mae, float(np.mean(list(rmse.values()))), float(np.mean(list(mae.values())))


def evaluate_forecasts(
    data: PanelData,
    graph: AdjacencyGraph,
    config: ChainConfig,
    t0: int,
    output: Optional[ChainOutput] = None,
) -> MetricReport:
    """Predictive log-likelihoods and forecast errors from one set of refits.

    With `output` (a fit on the full panel) WAIC and in-sample errors are added.
    """
    report = MetricReport()
    for t, logp, rmse, mae in _forecast_years(data, graph, config, t0):
        year = data.times[t - 1]
        report.predictive[year] = logp
        report.rmse[year] = rmse
        report.mae[year] = mae
    if output is not None:
        add_fit_metrics(report, output, data)
    return report


def add_fit_metrics(report: MetricReport, output: ChainOutput, data: PanelData) -> MetricReport:
    report.waic, report.lppd, report.p_waic = waic(output.loglik)
    report.in_sample_rmse, report.in_sample_mae = in_sample_error(output, data)
    return report


def in_sample_error(output: ChainOutput, data: PanelData):
    """(RMSE, MAE) of x_it' beta_hat_i + w_hat_it with posterior means."""
    if output.n_units != data.n_units or len(output.times) != data.n_times:
        raise DataError(
            "Draws do not match the panel",
            {"Draws": (output.n_units, len(output.times)), "Panel": (data.n_units, data.n_times)},
        )
    beta_hat = output.unit_betas.mean(axis=0)
    w_hat = output.w.mean(axis=0)
    y_hat = np.einsum("itk,ik->it", data.x, beta_hat) + w_hat
    return point_errors(data.y, y_hat)


def write_metrics(report: MetricReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    report.to_frame().to_csv(os.path.join(out_dir, "metrics.csv"), index=False)
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(render("metrics.txt", report=report))
    logger.info(f"Wrote metrics to {out_dir}")
