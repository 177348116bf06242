import numpy as np
import pytest
from scipy.stats import kstest, norm

from bstc.constant import DataError, NumericalError
from bstc.data import AdjacencyGraph, PanelData
from bstc.dp_cluster import ClusterState
from bstc.gmrf import (
    band_cholesky,
    conditional_site_density,
    joint_precision_omega,
    logdet,
    random_effects_full_conditional,
    sample_block_tridiagonal,
    sample_var_prior,
    solve_factor,
    var_quadratic_form,
)
from bstc.sampler import ModelState
from bstc.simulate import grid_graph
from bstc.spatial import BandedSPD, leroux_precision


def random_graph(rng, n):
    edges = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5}
    return AdjacencyGraph(n, frozenset(edges))


def time_major(w):
    return w.T.reshape(-1)


def test_cholesky_identity():
    f = band_cholesky(BandedSPD.identity(4))
    assert np.allclose(f.to_dense(), np.eye(4))


def test_cholesky_two_by_two():
    f = band_cholesky(BandedSPD.from_dense(np.array([[4.0, 2.0], [2.0, 5.0]])))
    assert np.allclose(f.to_dense(), [[2.0, 0.0], [1.0, 2.0]])


def test_cholesky_indefinite():
    with pytest.raises(NumericalError, match="not positive definite"):
        band_cholesky(BandedSPD.from_dense(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_cholesky_random_bands(rng):
    for n in (5, 20, 50):
        a = rng.normal(size=(n, n))
        a = np.tril(np.triu(a + a.T, -3), 3)
        a += np.diag(np.abs(a).sum(axis=1) + 0.5)
        m = BandedSPD.from_dense(a)
        f = band_cholesky(m)
        L = f.to_dense()
        assert np.max(np.abs(L @ L.T - a)) < 1e-10
        assert abs(logdet(f) - np.linalg.slogdet(a)[1]) < 1e-9
        v = rng.normal(size=n)
        assert np.allclose(L @ solve_factor(f, v), v)
        assert np.allclose(L.T @ solve_factor(f, v, transpose=True), v)


def test_omega_single_time(grid3):
    q = leroux_precision(0.6, grid3)
    omega = joint_precision_omega(np.full(9, 0.4), 2.0, q, 1)
    assert np.allclose(omega.to_dense(), q.to_dense() / 2.0)


def test_omega_zero_xi_is_block_diagonal(grid3):
    q = leroux_precision(0.6, grid3)
    omega = joint_precision_omega(np.zeros(9), 0.5, q, 3)
    for block in omega.off_blocks:
        assert np.all(block == 0)
    for block in omega.diag_blocks:
        assert np.allclose(block.to_dense(), q.to_dense() / 0.5)


def test_omega_quadratic_form_identity(rng):
    for _ in range(200):
        n = int(rng.integers(2, 6))
        T = int(rng.integers(1, 5))
        q = leroux_precision(rng.uniform(0, 0.99), random_graph(rng, n))
        xi = rng.uniform(-0.99, 0.99, size=n)
        tau2 = rng.uniform(0.2, 3.0)
        w = rng.normal(size=(n, T))
        omega = joint_precision_omega(xi, tau2, q, T)
        v = time_major(w)
        dense = v @ omega.to_dense() @ v
        assert abs(omega.quad(w) - var_quadratic_form(w, xi, q) / tau2) < 1e-9
        assert abs(dense - var_quadratic_form(w, xi, q) / tau2) < 1e-9


def test_quadratic_form_dense_oracle(rng, grid3):
    q = leroux_precision(0.8, grid3)
    w = rng.normal(size=(9, 4))
    xi = rng.uniform(-1, 1, size=9)
    qd = q.to_dense()
    expected = w[:, 0] @ qd @ w[:, 0]
    for t in range(1, 4):
        r = w[:, t] - xi * w[:, t - 1]
        expected += r @ qd @ r
    assert abs(var_quadratic_form(w, xi, q) - expected) < 1e-10


def make_state(rng, I, T, p, k=2, sigma2=0.7, tau2=1.3):
    s = np.arange(I) % k
    betas = rng.normal(size=(k, p + 1))
    xis = rng.uniform(-0.9, 0.9, size=k)
    cluster = ClusterState(s, betas, xis, 1.0)
    return ModelState(cluster, rng.normal(size=(I, T)), sigma2, tau2, 0.6)


def make_data(rng, I, T, p):
    x = np.ones((I, T, p + 1))
    x[:, :, 1:] = rng.normal(size=(I, T, p))
    return PanelData([str(i) for i in range(I)], list(range(T)), rng.normal(size=(I, T)), x)


def test_full_conditional_single_time(rng):
    graph = random_graph(rng, 3)
    q = leroux_precision(0.5, graph)
    data = make_data(rng, 3, 1, 1)
    state = make_state(rng, 3, 1, 1)
    psi, c = random_effects_full_conditional(state, data, q)
    expected = np.eye(3) / state.sigma2 + q.to_dense() / state.tau2
    assert np.allclose(psi.to_dense(), expected)
    fitted = np.einsum("itk,ik->it", data.x, state.unit_betas)
    assert np.allclose(c, (data.y - fitted) / state.sigma2)


def test_full_conditional_dimension_mismatch(rng):
    data = make_data(rng, 3, 2, 1)
    with pytest.raises(DataError):
        random_effects_full_conditional(make_state(rng, 3, 2, 1), data, BandedSPD.identity(4))


def _dense_oracle(psi, c):
    P = psi.to_dense()
    cov = np.linalg.inv(P)
    return cov @ time_major(c), cov


def _sampler_moments(rng, n_draws):
    graph = AdjacencyGraph(3, frozenset({(0, 1), (1, 2)}))
    q = leroux_precision(0.7, graph)
    data = make_data(rng, 3, 3, 1)
    state = make_state(rng, 3, 3, 1)
    psi, c = random_effects_full_conditional(state, data, q)
    draws = np.array([time_major(sample_block_tridiagonal(psi, c, rng).w) for _ in range(n_draws)])
    mean, cov = _dense_oracle(psi, c)
    return draws, mean, cov


def test_block_sampler_mean_quick(rng):
    draws, mean, cov = _sampler_moments(rng, 4000)
    se = np.sqrt(np.diag(cov) / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * se)


@pytest.mark.slow
def test_block_sampler_moments(rng):
    draws, mean, cov = _sampler_moments(rng, 100000)
    m = len(draws)
    se = np.sqrt(np.diag(cov) / m)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se)
    emp = np.cov(draws, rowvar=False)
    se_cov = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / m)
    assert np.all(np.abs(emp - cov) < 4 * se_cov)


def test_block_sampler_permutation_equivariant(rng):
    graph = AdjacencyGraph(4, frozenset({(0, 2), (1, 2), (1, 3)}))
    perm = np.array([2, 0, 3, 1])
    pos = np.argsort(perm)
    data = make_data(rng, 4, 2, 1)
    state = make_state(rng, 4, 2, 1)
    psi, c = random_effects_full_conditional(state, data, leroux_precision(0.6, graph))
    mean, cov = _dense_oracle(psi, c)

    moved = graph.with_permutation(perm).relabeled()
    cluster = state.cluster
    moved_state = ModelState(
        ClusterState(cluster.s[perm], cluster.betas, cluster.xis, cluster.alpha),
        state.w[perm], state.sigma2, state.tau2, state.rho,
    )
    psi_p, c_p = random_effects_full_conditional(moved_state, data.permuted(perm), leroux_precision(0.6, moved))

    n = 6000
    direct = np.array([time_major(sample_block_tridiagonal(psi, c, rng).w) for _ in range(n)])
    back = np.array([time_major(sample_block_tridiagonal(psi_p, c_p, rng).w[pos]) for _ in range(n)])
    se = np.sqrt(np.diag(cov) / n)
    for draws in (direct, back):
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * se)
        assert np.allclose(draws.var(axis=0), np.diag(cov), rtol=0.1)


def test_block_sampler_scalar_spatial_dimension(rng):
    graph = AdjacencyGraph(1, frozenset())
    q = leroux_precision(0.5, graph)
    data = make_data(rng, 1, 2, 0)
    state = make_state(rng, 1, 2, 0, k=1)
    psi, c = random_effects_full_conditional(state, data, q)
    mean, cov = _dense_oracle(psi, c)
    draws = np.array([sample_block_tridiagonal(psi, c, rng).w[0, 1] for _ in range(5000)])
    assert kstest(draws, norm(mean[1], np.sqrt(cov[1, 1])).cdf).pvalue > 0.01


def test_block_sampler_is_deterministic(rng):
    graph = grid_graph(2, 2)
    q = leroux_precision(0.5, graph)
    data = make_data(rng, 4, 3, 1)
    state = make_state(rng, 4, 3, 1)
    psi, c = random_effects_full_conditional(state, data, q)
    a = sample_block_tridiagonal(psi, c, np.random.default_rng(5)).w
    b = sample_block_tridiagonal(psi, c, np.random.default_rng(5)).w
    assert np.array_equal(a, b)


def test_site_density_rho_zero(rng):
    q = leroux_precision(0.0, AdjacencyGraph(3, frozenset({(0, 1)})))
    w = rng.normal(size=(3, 4))
    xi = np.array([0.3, -0.2, 0.5])
    prev = np.concatenate([[0.0], w[1, :-1]])
    expected = norm.logpdf(w[1], xi[1] * prev, np.sqrt(2.0)).sum()
    assert abs(conditional_site_density(1, w, xi[1], xi, 2.0, q) - expected) < 1e-12


def test_site_density_isolated_node(rng):
    rho, tau2 = 0.6, 1.5
    q = leroux_precision(rho, AdjacencyGraph(3, frozenset({(0, 1)})))
    w = rng.normal(size=(3, 2))
    expected = norm.logpdf(w[2, 0], 0.0, np.sqrt(tau2 / (1 - rho))) + norm.logpdf(
        w[2, 1], 0.4 * w[2, 0], np.sqrt(tau2 / (1 - rho))
    )
    got = conditional_site_density(2, w, 0.4, np.array([0.1, 0.2, 0.0]), tau2, q)
    assert abs(got - expected) < 1e-12


def test_site_density_dense_conditional(rng):
    I, T = 4, 3
    for _ in range(20):
        graph = random_graph(rng, I)
        q = leroux_precision(rng.uniform(0, 0.95), graph)
        xi = rng.uniform(-0.9, 0.9, size=I)
        tau2 = rng.uniform(0.5, 2.0)
        w = rng.normal(size=(I, T))
        i = int(rng.integers(I))
        P = joint_precision_omega(xi, tau2, q, T).to_dense()
        row = [t * I + i for t in range(T)]
        rest = [k for k in range(I * T) if k not in row]
        v = time_major(w)
        P_rr = P[np.ix_(row, row)]
        mean = -np.linalg.solve(P_rr, P[np.ix_(row, rest)] @ v[rest])
        d = v[row] - mean
        expected = 0.5 * np.linalg.slogdet(P_rr)[1] - 0.5 * T * np.log(2 * np.pi) - 0.5 * d @ P_rr @ d
        got = conditional_site_density(i, w, xi[i], xi, tau2, q)
        assert abs(got - expected) < 1e-8


def test_site_density_vectorized(rng, grid3):
    q = leroux_precision(0.5, grid3)
    w = rng.normal(size=(9, 3))
    xi = rng.uniform(-0.5, 0.5, size=9)
    candidates = np.array([-0.5, 0.0, 0.7])
    batch = conditional_site_density(4, w, candidates, xi, 1.0, q)
    single = [conditional_site_density(4, w, c, xi, 1.0, q) for c in candidates]
    assert np.allclose(batch, single)


def test_var_prior_first_time_covariance(rng, grid3):
    q = leroux_precision(0.8, grid3)
    draws = np.array([sample_var_prior(np.zeros(9), 1.0, q, 1, rng)[:, 0] for _ in range(4000)])
    cov = np.linalg.inv(q.to_dense())
    se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / len(draws))
    assert np.all(np.abs(np.cov(draws, rowvar=False) - cov) < 5 * se)
    assert np.all(np.abs(draws.mean(axis=0)) < 5 * np.sqrt(np.diag(cov) / len(draws)))
