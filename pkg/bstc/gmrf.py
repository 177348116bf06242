"""Banded Gaussian Markov random field algebra for the spatio-temporal effects.

The effects ``w`` are stored unit-major as an ``I x T`` matrix; block ``t`` of a
block-tridiagonal precision acts on column ``w[:, t]``.
"""
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg as scla
from scipy.stats import norm

from bstc.constant import DataError, NumericalError
from bstc.spatial import BandedSPD

if TYPE_CHECKING:
    from bstc.data import PanelData
    from bstc.sampler import ModelState


@dataclass(frozen=True, eq=False)
class RandomEffects:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2:
            raise DataError("Random effects must be an I x T matrix", {"Shape": w.shape})
        if not np.isfinite(w).all():
            raise NumericalError("Non-finite random effects")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True, eq=False)
class BlockTridiagonal:
    """Symmetric block-tridiagonal precision with banded I x I blocks.

    ``off_blocks[t]`` is block (t, t+1); block (t+1, t) is its transpose.
    """

    T: int
    diag_blocks: list
    off_blocks: list

    def __post_init__(self):
        if len(self.diag_blocks) != self.T or len(self.off_blocks) != max(self.T - 1, 0):
            raise DataError(
                "Wrong number of blocks",
                {"T": self.T, "Diagonal": len(self.diag_blocks), "Off": len(self.off_blocks)},
            )

    @property
    def block_size(self) -> int:
        return self.diag_blocks[0].n

    def to_dense(self) -> np.ndarray:
        """Dense (I*T) x (I*T) matrix in time-major order (index t*I + i)."""
        size = self.block_size
        out = np.zeros((size * self.T, size * self.T))
        for t, block in enumerate(self.diag_blocks):
            out[t * size:(t + 1) * size, t * size:(t + 1) * size] = block.to_dense()
        for t, block in enumerate(self.off_blocks):
            out[t * size:(t + 1) * size, (t + 1) * size:(t + 2) * size] = block
            out[(t + 1) * size:(t + 2) * size, t * size:(t + 1) * size] = block.T
        return out

    def quad(self, w) -> float:
        w = np.asarray(w, dtype=float)
        total = sum(block.quad(w[:, t]) for t, block in enumerate(self.diag_blocks))
        total += 2.0 * sum(
            float(w[:, t] @ block @ w[:, t + 1]) for t, block in enumerate(self.off_blocks)
        )
        return float(total)

    def add_identity(self, c: float) -> "BlockTridiagonal":
        return BlockTridiagonal(
            self.T, [block.add_diagonal(c) for block in self.diag_blocks], list(self.off_blocks)
        )


def band_cholesky(m: BandedSPD) -> BandedSPD:
    """Lower Cholesky factor L of a banded SPD matrix, m = L L'."""
    if m.is_factor:
        raise DataError("Expected a matrix, got a Cholesky factor")
    try:
        bands = scla.cholesky_banded(m.bands, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError("not positive definite", {"n": m.n, "bandwidth": m.bandwidth})
    return BandedSPD(m.n, m.bandwidth, bands, is_factor=True)


def solve_factor(factor: BandedSPD, rhs, transpose: bool = False) -> np.ndarray:
    """Solve L x = rhs (or L' x = rhs) by banded back-substitution."""
    b = factor.bandwidth
    if not transpose:
        return scla.solve_banded((b, 0), factor.bands, rhs)
    n = factor.n
    upper = np.zeros((b + 1, n))
    for k in range(b + 1):
        upper[b - k, k:] = factor.bands[k, : n - k]
    return scla.solve_banded((0, b), upper, rhs)


def logdet(factor: BandedSPD) -> float:
    return float(2.0 * np.log(factor.bands[0]).sum())


def _check_xi(xi, size):
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (size,):
        raise DataError("xi does not match the precision", {"xi": xi.shape, "I": size})
    return xi


def joint_precision_omega(xi, tau2: float, Q: BandedSPD, T: int) -> BlockTridiagonal:
    """Prior precision of (w_1, ..., w_T) under the VAR(1) CAR process."""
    xi = _check_xi(xi, Q.n)
    if T < 1:
        raise DataError("T must be positive", {"T": T})
    inner = (Q + Q.congruence(xi)).scale(1.0 / tau2)
    last = Q.scale(1.0 / tau2)
    off = -(xi[:, None] * Q.to_dense()) / tau2  # -tau^-2 diag(xi) Q
    diag = [inner] * (T - 1) + [last]
    return BlockTridiagonal(T, diag, [off] * (T - 1))


def fitted_values(x, unit_betas) -> np.ndarray:
    """x_it' beta_i for every cell."""
    return np.einsum("itk,ik->it", x, unit_betas)


def random_effects_full_conditional(state: "ModelState", data: "PanelData", Q: BandedSPD):
    """Full conditional N(Psi^-1 c, Psi^-1) of the random effects."""
    if Q.n != data.n_units:
        raise DataError("Dimension mismatch", {"Q": Q.n, "I": data.n_units})
    cluster = state.cluster
    xi_units = cluster.xis[cluster.s]
    omega = joint_precision_omega(xi_units, state.tau2, Q, data.n_times)
    psi = omega.add_identity(1.0 / state.sigma2)
    fitted = fitted_values(data.x, cluster.betas[cluster.s])
    c = (data.y - fitted) / state.sigma2
    return psi, c


def sample_block_tridiagonal(psi: BlockTridiagonal, c, rng: np.random.Generator) -> RandomEffects:
    """Exact draw from N(Psi^-1 c, Psi^-1) by forward elimination and backward sampling.

    The Schur complements Sigma_t^-1 = Psi_tt - Psi_t-1,t' Sigma_t-1 Psi_t-1,t fill in
    whenever xi != 0, so their band is re-detected before factorizing.
    """
    c = np.asarray(c, dtype=float)
    size, T = c.shape
    if T != psi.T or size != psi.block_size:
        raise DataError("Dimension mismatch", {"Psi": (psi.block_size, psi.T), "c": c.shape})

    factors = []
    means = []
    for t in range(T):
        if t == 0:
            prec = psi.diag_blocks[0]
            rhs = c[:, 0]
        else:
            off = psi.off_blocks[t - 1]
            f = solve_factor(factors[t - 1], off)
            prec = BandedSPD.from_dense(psi.diag_blocks[t].to_dense() - f.T @ f)
            rhs = c[:, t] - off.T @ means[t - 1]
        factor = band_cholesky(prec)
        factors.append(factor)
        means.append(solve_factor(factor, solve_factor(factor, rhs), transpose=True))

    z = rng.standard_normal((size, T))
    w = np.empty((size, T))
    w[:, T - 1] = means[T - 1] + solve_factor(factors[T - 1], z[:, T - 1], transpose=True)
    for t in range(T - 2, -1, -1):
        shift = solve_factor(factors[t], psi.off_blocks[t] @ w[:, t + 1])
        w[:, t] = means[t] + solve_factor(factors[t], z[:, t] - shift, transpose=True)
    return RandomEffects(w)


def innovations(w, xi_units) -> np.ndarray:
    """w_t - diag(xi) w_{t-1}, with w_0 = 0."""
    w = np.asarray(w, dtype=float)
    out = w.copy()
    out[:, 1:] -= np.asarray(xi_units)[:, None] * w[:, :-1]
    return out


def var_quadratic_form(w, xi_units, Q: BandedSPD) -> float:
    """w_1'Q w_1 + sum_t (w_t - diag(xi) w_t-1)' Q (w_t - diag(xi) w_t-1)."""
    r = innovations(w, xi_units)
    return float(np.sum(r * Q.dot(r)))


def conditional_site_density(i: int, w, xi_i, xi_units, tau2: float, Q: BandedSPD):
    """log p(w_i. | w_-i., xi_i, ...) as a product over t of univariate Gaussians.

    `xi_i` may be an array of candidate values; the result then has the same shape.
    The entry ``xi_units[i]`` is ignored.
    """
    w = np.asarray(w, dtype=float)
    prev = np.zeros_like(w)
    prev[:, 1:] = w[:, :-1]
    resid = w - np.asarray(xi_units, dtype=float)[:, None] * prev
    q_row = Q.row(i)
    q_ii = q_row[i]
    q_row[i] = 0.0
    r = q_row @ resid
    scale = np.sqrt(tau2 / q_ii)
    xi_i = np.asarray(xi_i, dtype=float)
    mean = xi_i[..., None] * prev[i] - r / q_ii
    return norm.logpdf(w[i], mean, scale).sum(axis=-1)


def sample_var_prior(xi_units, tau2: float, Q: BandedSPD, T: int, rng: np.random.Generator) -> np.ndarray:
    """Forward simulation of w_1 ~ N(0, tau2 Q^-1), w_t | w_t-1 ~ N(diag(xi) w_t-1, tau2 Q^-1)."""
    xi = _check_xi(xi_units, Q.n)
    factor = band_cholesky(Q)
    z = rng.standard_normal((Q.n, T))
    w = np.empty((Q.n, T))
    sd = np.sqrt(tau2)
    for t in range(T):
        w[:, t] = sd * solve_factor(factor, z[:, t], transpose=True)
        if t > 0:
            w[:, t] += xi * w[:, t - 1]
    return w
