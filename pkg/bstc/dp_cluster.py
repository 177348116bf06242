"""Dirichlet-process clustering of the unit-level parameters (beta_i, xi_i).

Allocation labels are 0-based internally; canonical means label j first appears
before label j+1 when scanning units in order.
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg as scla
from scipy import integrate
from scipy.special import gammaln
from scipy.stats import beta as beta_dist, gamma as gamma_dist

from bstc.config import BaseMeasure
from bstc.constant import NumericalError, PartitionError
from bstc.gmrf import conditional_site_density, var_quadratic_form
from bstc.spatial import BandedSPD

if TYPE_CHECKING:
    from bstc.data import PanelData
    from bstc.sampler import ModelState


@dataclass(eq=False)
class ClusterState:
    s: np.ndarray
    betas: np.ndarray
    xis: np.ndarray
    alpha: float

    @property
    def k(self) -> int:
        return self.betas.shape[0]

    def copy(self) -> "ClusterState":
        return ClusterState(self.s.copy(), self.betas.copy(), self.xis.copy(), self.alpha)

    def check(self):
        if not is_canonical(self.s):
            raise PartitionError("non-canonical labels")
        if self.betas.shape[0] != self.s.max() + 1 or self.xis.shape[0] != self.betas.shape[0]:
            raise PartitionError(
                "Cluster parameters do not match the labels",
                {"K": int(self.s.max()) + 1, "betas": self.betas.shape[0], "xis": self.xis.shape[0]},
            )
        if not np.all(np.abs(self.xis) < 1.0):
            raise NumericalError("xi left (-1, 1)")
        return self


def canonicalize(labels):
    """Relabel by first occurrence.

    Returns ``(canonical, order)`` where ``order[new] = old`` so that cluster-level
    arrays are reordered with ``params[order]``.
    """
    labels = np.asarray(labels)
    _, first = np.unique(labels, return_index=True)
    order_idx = np.sort(first)
    order = labels[order_idx]
    mapping = {old: new for new, old in enumerate(order)}
    canonical = np.array([mapping[v] for v in labels], dtype=int)
    return canonical, np.asarray(order)


def is_canonical(labels) -> bool:
    labels = np.asarray(labels)
    if labels.size == 0 or labels[0] != 0:
        return False
    seen_max = np.maximum.accumulate(labels)
    step = np.diff(np.concatenate([[-1], seen_max]))
    return bool(np.all(labels >= 0) and np.all(labels <= seen_max) and np.all(step <= 1))


def polya_urn_log_prior(s, alpha: float) -> float:
    """log P(s | alpha) under the sequential Polya urn."""
    s = np.asarray(s)
    if not is_canonical(s):
        raise PartitionError("non-canonical labels")
    counts = np.bincount(s)
    n = s.size
    k = counts.size
    return float(
        (k - 1) * np.log(alpha) + gammaln(counts).sum() - np.log(np.arange(1, n) + alpha).sum()
    )


def draw_polya_urn(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    s = np.zeros(n, dtype=int)
    counts = [1]
    for i in range(1, n):
        weights = np.array(counts + [alpha], dtype=float)
        j = rng.choice(weights.size, p=weights / weights.sum())
        if j == len(counts):
            counts.append(1)
        else:
            counts[j] += 1
        s[i] = j
    return s


def prior_cluster_moments(n: int, a_alpha: float, b_alpha: float):
    """Prior mean and variance of the number of clusters with alpha ~ Gamma(a, rate b).

    Exact up to quadrature error; for n=110, a=3, b=2 the mean is 6.80, often quoted as 6.75.
    """
    m = np.arange(n)

    def conditional(alpha):
        mean = np.sum(alpha / (alpha + m))
        var = np.sum(alpha * m / (alpha + m) ** 2)
        return mean, var

    density = gamma_dist(a_alpha, scale=1.0 / b_alpha).pdf
    e1 = integrate.quad(lambda a: conditional(a)[0] * density(a), 0, np.inf)[0]
    e2 = integrate.quad(
        lambda a: (conditional(a)[1] + conditional(a)[0] ** 2) * density(a), 0, np.inf
    )[0]
    return e1, e2 - e1 ** 2


def _unit_loglik(x_i, r_i, betas, sigma2):
    """log N_T(r_i | x_i beta, sigma2 I) for every candidate beta (rows)."""
    diff = r_i[:, None] - x_i @ betas.T
    t = r_i.size
    return -0.5 * (diff ** 2).sum(axis=0) / sigma2 - 0.5 * t * np.log(2 * np.pi * sigma2)


def gibbs_allocations(
    state: "ModelState",
    data: "PanelData",
    Q: BandedSPD,
    base: BaseMeasure,
    n_aux: int,
    rng: np.random.Generator,
    prior_only: bool = False,
    order=None,
) -> ClusterState:
    """One sweep of the auxiliary-variable allocation sampler with re-use of emptied values.

    Units are visited in `order` (default 0..I-1).
    """
    cluster = state.cluster
    s = cluster.s.copy()
    betas = cluster.betas.copy()
    xis = cluster.xis.copy()
    counts = np.bincount(s, minlength=betas.shape[0])
    alpha = cluster.alpha
    w = state.w
    resid = data.y - w
    aux_b, aux_x = base.draw(rng, n_aux)
    xi_units = xis[s]
    log_new = np.log(alpha / n_aux)

    for i in range(data.n_units) if order is None else order:
        j = s[i]
        counts[j] -= 1
        if counts[j] == 0:
            slot = rng.integers(n_aux)
            aux_b[slot] = betas[j]
            aux_x[slot] = xis[j]
            betas = np.delete(betas, j, axis=0)
            xis = np.delete(xis, j)
            counts = np.delete(counts, j)
            s[s > j] -= 1

        k = betas.shape[0]
        cand_b = np.vstack([betas, aux_b]) if k else aux_b
        cand_x = np.concatenate([xis, aux_x])
        with np.errstate(divide="ignore"):
            log_w = np.concatenate([np.log(counts), np.full(n_aux, log_new)])
        if not prior_only:
            log_w = log_w + _unit_loglik(data.x[i], resid[i], cand_b, state.sigma2)
            log_w = log_w + conditional_site_density(i, w, cand_x, xi_units, state.tau2, Q)
        probs = np.exp(log_w - log_w.max())
        probs /= probs.sum()
        choice = rng.choice(probs.size, p=probs)

        if choice < k:
            s[i] = choice
            counts[choice] += 1
        else:
            slot = choice - k
            betas = np.vstack([betas, aux_b[slot]]) if k else aux_b[slot][None, :].copy()
            xis = np.append(xis, aux_x[slot])
            counts = np.append(counts, 1)
            s[i] = k
            fresh_b, fresh_x = base.draw(rng, 1)
            aux_b[slot] = fresh_b[0]
            aux_x[slot] = fresh_x[0]
        xi_units[i] = xis[s[i]]

    s, relabel = canonicalize(s)
    return ClusterState(s, betas[relabel], xis[relabel], alpha)


def cluster_beta_posterior(x_c, r_c, sigma2: float, base: BaseMeasure):
    """Conjugate normal posterior of one cluster's coefficients.

    Returns the posterior mean and the lower Cholesky factor of the posterior precision.
    """
    prec = base.precision + x_c.T @ x_c / sigma2
    b = base.precision @ base.mu0 + x_c.T @ r_c / sigma2
    try:
        chol = scla.cholesky(prec, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("non-SPD posterior precision")
    mean = scla.cho_solve((chol, True), b)
    return mean, chol


def update_cluster_betas(state: "ModelState", data: "PanelData", sigma2: float, base: BaseMeasure, rng: np.random.Generator) -> np.ndarray:
    cluster = state.cluster
    resid = data.y - state.w
    dim = data.p + 1
    betas = np.empty((cluster.k, dim))
    for j in range(cluster.k):
        units = np.flatnonzero(cluster.s == j)
        if units.size == 0:
            raise NumericalError("Empty cluster", {"Cluster": j})
        x_c = data.x[units].reshape(-1, dim)
        r_c = resid[units].reshape(-1)
        mean, chol = cluster_beta_posterior(x_c, r_c, sigma2, base)
        z = rng.standard_normal(dim)
        betas[j] = mean + scla.solve_triangular(chol, z, lower=True, trans="T")
    return betas


def xi_log_target(xi_j: float, j: int, cluster: ClusterState, w, tau2: float, Q: BandedSPD, base: BaseMeasure, prior_only: bool = False) -> float:
    """Unnormalized log full conditional of xi*_j on the xi scale."""
    lp = beta_dist(base.a_xi, base.b_xi, loc=-1.0, scale=2.0).logpdf(xi_j)
    if prior_only:
        return float(lp)
    xis = cluster.xis.copy()
    xis[j] = xi_j
    return float(lp - 0.5 * var_quadratic_form(w, xis[cluster.s], Q) / tau2)


def update_cluster_xis(state: "ModelState", w, tau2: float, Q: BandedSPD, base: BaseMeasure, step: float, rng: np.random.Generator, prior_only: bool = False):
    """Random-walk Metropolis on atanh(xi) for every cluster.

    Returns the new values and the number of accepted proposals.
    """
    cluster = state.cluster.copy()
    accepted = 0
    for j in range(cluster.k):
        xi = cluster.xis[j]
        z = np.arctanh(xi)
        proposal = np.tanh(z + step * rng.standard_normal())
        if not abs(proposal) < 1.0:
            continue
        current = xi_log_target(xi, j, cluster, w, tau2, Q, base, prior_only)
        candidate = xi_log_target(proposal, j, cluster, w, tau2, Q, base, prior_only)
        # d xi / dz = 1 - xi^2
        log_ratio = candidate - current + np.log1p(-proposal ** 2) - np.log1p(-xi ** 2)
        if np.log(rng.random()) < log_ratio:
            cluster.xis[j] = proposal
            accepted += 1
    return cluster.xis, accepted


def update_concentration(alpha: float, k: int, n: int, prior, rng: np.random.Generator) -> float:
    """Auxiliary-variable update of the DP mass parameter (two-gamma mixture)."""
    a, b = prior
    x = rng.beta(alpha + 1.0, n)
    rate = b - np.log(x)
    odds = (a + k - 1.0) / (n * rate)
    pi = odds / (1.0 + odds)
    shape = a + k if rng.random() < pi else a + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


@dataclass
class AdaptiveStep:
    """Random-walk step size with Robbins-Monro tuning of log(step) during burn-in."""

    step: float
    target: float = 0.3
    adapted: int = 0
    tries: int = 0
    accepted: int = 0

    def record(self, accepted: int, tries: int = 1, adapt: bool = False):
        self.tries += tries
        self.accepted += accepted
        if adapt and tries:
            self.adapted += 1
            gain = self.adapted ** -0.6
            self.step = float(np.exp(np.log(self.step) + gain * (accepted / tries - self.target)))

    def reset(self):
        self.tries = 0
        self.accepted = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.tries if self.tries else float("nan")
