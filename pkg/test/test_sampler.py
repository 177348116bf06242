import numpy as np
import pytest
from scipy.stats import beta as beta_dist, invgamma, kstest

from bstc.config import ChainConfig
from bstc.constant import ConfigError, DataError, NumericalError, PartitionError
from bstc.data import AdjacencyGraph, PanelData
from bstc.dp_cluster import AdaptiveStep, ClusterState
from bstc.sampler import (
    ChainOutput,
    ModelState,
    PrecisionCache,
    draw_response,
    initial_state,
    posterior_cluster_summary,
    rho_log_target,
    run_chain,
    run_chains,
    run_conditional_on_partition,
    sigma2_posterior,
    sweep,
    tau2_posterior,
    unit_loglik,
    update_rho,
    update_sigma2,
)
from bstc.spatial import leroux_precision


def quick_config(**changes):
    base = dict(iterations=60, burn_in=20, thin=2, log_every=0, n_aux=3, workers=1)
    base.update(changes)
    return ChainConfig(**base)


def state_for(panel, s=None, w=None):
    I, T = panel.n_units, panel.n_times
    s = np.zeros(I, dtype=int) if s is None else np.asarray(s)
    k = int(s.max()) + 1
    w = np.zeros((I, T)) if w is None else w
    return ModelState(ClusterState(s, np.zeros((k, panel.p + 1)), np.zeros(k), 1.0), w, 1.0, 1.0, 0.5)


def test_sigma2_posterior_parameters(small_panel):
    state = state_for(small_panel)
    shape, scale = sigma2_posterior(state, small_panel, (3.0, 2.0))
    assert shape == 3.0 + 0.5 * 12
    assert scale == pytest.approx(2.0 + 0.5 * np.sum(small_panel.y ** 2))


def test_sigma2_draw_moments(small_panel, rng):
    state = state_for(small_panel)
    shape, scale = sigma2_posterior(state, small_panel, (3.0, 2.0))
    draws = np.array([update_sigma2(state, small_panel, (3.0, 2.0), rng) for _ in range(20000)])
    dist = invgamma(shape, scale=scale)
    assert abs(draws.mean() - dist.mean()) < 4 * dist.std() / np.sqrt(draws.size)


def test_tau2_posterior_parameters(small_panel, path_graph, rng):
    w = rng.normal(size=(4, 3))
    state = state_for(small_panel, w=w)
    q = leroux_precision(0.5, path_graph)
    shape, scale = tau2_posterior(state, q, (3.0, 2.0))
    qd = q.to_dense()
    expected = sum(w[:, t] @ qd @ w[:, t] for t in range(3))  # xi = 0
    assert shape == 3.0 + 6.0
    assert scale == pytest.approx(2.0 + 0.5 * expected)


def test_rho_stays_in_unit_interval(small_panel, path_graph, rng):
    state = state_for(small_panel, w=rng.normal(size=(4, 3)))
    cache = PrecisionCache(path_graph)
    for _ in range(300):
        state.rho, _ = update_rho(state, path_graph, (6.0, 1.0), 2.0, rng, cache)
        assert 0 < state.rho < 1
    assert len(cache.cache) <= 8


def test_rho_prior_only_matches_beta(small_panel, path_graph, rng):
    state = state_for(small_panel)
    state.rho = 0.5
    draws = []
    for it in range(30000):
        state.rho, _ = update_rho(state, path_graph, (6.0, 1.0), 2.0, rng, prior_only=True)
        if it % 15 == 0:
            draws.append(state.rho)
    draws = np.array(draws)
    assert abs(draws.mean() - 6 / 7) < 0.02
    assert kstest(draws, beta_dist(6.0, 1.0).cdf).pvalue > 0.01


def _two_node_log_ratio(w, tau2, rho, proposal, prior):
    def target(r):
        q = np.array([[1.0, -r], [-r, 1.0]])
        # |Q| = 1 - r^2
        quad = sum(w[:, t] @ q @ w[:, t] for t in range(w.shape[1]))
        return beta_dist(*prior).logpdf(r) + 0.5 * w.shape[1] * np.log1p(-r ** 2) - 0.5 * quad / tau2

    jacobian = np.log(proposal * (1 - proposal)) - np.log(rho * (1 - rho))
    return target(proposal) - target(rho) + jacobian


def test_rho_acceptance_matches_dense_determinant(rng, mocker):
    graph = AdjacencyGraph(2, frozenset({(0, 1)}))
    panel = PanelData(["a", "b"], [1, 2, 3], np.zeros((2, 3)), np.ones((2, 3, 1)))
    w = rng.normal(size=(2, 3))
    prior = (6.0, 1.0)
    cache = PrecisionCache(graph)
    for rho, eps in ((0.4, 0.8), (1 / (1 + np.exp(-(np.log(0.4 / 0.6) + 0.8))), -0.8)):
        state = state_for(panel, w=w)
        state.tau2, state.rho = 0.7, rho
        proposal = 1 / (1 + np.exp(-(np.log(rho / (1 - rho)) + eps)))
        expected = _two_node_log_ratio(w, 0.7, rho, proposal, prior)
        got = rho_log_target(proposal, state, cache, prior) - rho_log_target(rho, state, cache, prior)
        got += np.log(proposal * (1 - proposal)) - np.log(rho * (1 - rho))
        assert got == pytest.approx(expected, abs=1e-10)

        fake = mocker.Mock()
        fake.standard_normal.return_value = eps
        fake.random.return_value = np.exp(min(expected, 0.0) - 1e-6)
        new, accepted = update_rho(state, graph, prior, 1.0, fake, cache)
        assert accepted == 1 and new == pytest.approx(proposal)
        if expected < -1e-6:
            fake.random.return_value = np.exp(expected + 1e-6)
            assert update_rho(state, graph, prior, 1.0, fake, cache) == (rho, 0)


def test_precision_cache_reuses(path_graph):
    cache = PrecisionCache(path_graph)
    q1, ld1 = cache.get(0.4)
    q2, ld2 = cache.get(0.4)
    assert q1 is q2 and ld1 == ld2
    assert cache.cache.hits == 1
    assert ld1 == pytest.approx(np.linalg.slogdet(q1.to_dense())[1])


def test_unit_loglik(small_panel):
    state = state_for(small_panel)
    ll = unit_loglik(state, small_panel)
    expected = -0.5 * np.sum(small_panel.y ** 2, axis=1) - 1.5 * np.log(2 * np.pi)
    assert np.allclose(ll, expected)


def test_draw_response_keeps_predictors(small_panel, rng):
    out = draw_response(state_for(small_panel), small_panel, rng)
    assert out.y.shape == small_panel.y.shape
    assert np.array_equal(out.x, small_panel.x)


def test_initial_state_default(small_panel, path_graph, rng):
    config = quick_config()
    state = initial_state(small_panel, PrecisionCache(path_graph), config, config.base_measure(1), rng)
    assert state.cluster.s.tolist() == [0, 0, 0, 0]
    assert np.all(state.w == 0)
    assert (state.sigma2, state.tau2, state.rho, state.cluster.alpha) == (1.0, 1.0, 0.9, 1.0)


def test_initial_state_prior(small_panel, path_graph, rng):
    config = quick_config(init="prior")
    state = initial_state(small_panel, PrecisionCache(path_graph), config, config.base_measure(1), rng)
    state.check()


def test_chain_draw_count(small_panel, path_graph):
    out = run_chain(small_panel, path_graph, quick_config())
    assert out.n_draws == 20
    assert out.s.shape == (20, 4)
    assert out.unit_betas.shape == (20, 4, 2)
    assert out.w.shape == (20, 4, 3)
    assert out.loglik.shape == (20, 4)
    assert np.all((out.rho > 0) & (out.rho < 1))
    assert np.all(out.k == out.s.max(axis=1) + 1)
    for row in out.s:
        assert row[0] == 0


def test_chain_is_deterministic(small_panel, path_graph):
    a = run_chain(small_panel, path_graph, quick_config(seed=3))
    b = run_chain(small_panel, path_graph, quick_config(seed=3))
    for name in ("s", "unit_betas", "unit_xis", "w", "sigma2", "tau2", "rho", "alpha", "loglik"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_chains_differ_by_index(small_panel, path_graph):
    a = run_chain(small_panel, path_graph, quick_config(), 0)
    b = run_chain(small_panel, path_graph, quick_config(), 1)
    assert not np.array_equal(a.sigma2, b.sigma2)


def test_chain_rejects_mismatched_graph(small_panel):
    with pytest.raises(DataError):
        run_chain(small_panel, AdjacencyGraph(3, frozenset()), quick_config())


def test_fixed_partition(small_panel, path_graph):
    config = quick_config(fixed_partition=[0, 0, 1, 1])
    out = run_conditional_on_partition(small_panel, path_graph, config)
    assert np.all(out.s == [0, 0, 1, 1])
    assert np.all(out.k == 2)
    summary = posterior_cluster_summary(out)
    assert set(summary["cluster"]) == {1, 2}
    assert set(summary["parameter"]) == {"beta_0", "beta_1", "xi"}
    assert np.all(summary["lower"] <= summary["upper"])


def test_fixed_partition_required(small_panel, path_graph):
    with pytest.raises(ConfigError):
        run_conditional_on_partition(small_panel, path_graph, quick_config())


def test_fixed_partition_wrong_length(small_panel, path_graph):
    with pytest.raises(PartitionError):
        run_chain(small_panel, path_graph, quick_config(fixed_partition=[0, 1]))


def test_summary_needs_one_partition(small_panel, path_graph):
    out = run_chain(small_panel, path_graph, quick_config())
    out.s[0] = [0, 1, 2, 3]
    with pytest.raises(PartitionError):
        posterior_cluster_summary(out)


def test_merge_chains(small_panel, path_graph):
    a = run_chain(small_panel, path_graph, quick_config(), 0)
    b = run_chain(small_panel, path_graph, quick_config(), 1)
    merged = a + b
    assert merged.n_draws == 40
    assert merged.extra["chains"] == 2
    assert np.array_equal(merged.sigma2[:20], a.sigma2)
    assert merged.acceptance["rho"] == pytest.approx((a.acceptance["rho"] + b.acceptance["rho"]) / 2)


def test_merge_rejects_other_panel(small_panel, path_graph):
    a = run_chain(small_panel, path_graph, quick_config())
    b = run_chain(small_panel, path_graph, quick_config())
    b.unit_ids = ["w", "x", "y", "z"]
    with pytest.raises(DataError):
        a + b


def test_run_chains_sequential_merge(small_panel, path_graph, mocker):
    spy = mocker.spy(ChainOutput, "__add__")
    out = run_chains(small_panel, path_graph, quick_config(n_chains=3))
    assert out.n_draws == 60
    assert out.extra["chains"] == 3
    assert spy.call_count == 2
    first = run_chain(small_panel, path_graph, quick_config(n_chains=3), 0)
    assert np.array_equal(out.sigma2[:20], first.sigma2)


def test_numerical_failure_reports_iteration(small_panel, path_graph, mocker):
    mocker.patch("bstc.sampler.update_sigma2", side_effect=NumericalError("boom"))
    with pytest.raises(NumericalError, match="Iteration: 1"):
        run_chain(small_panel, path_graph, quick_config())


def _batch_se(values, batches=50):
    means = np.array([b.mean() for b in np.array_split(values, batches)])
    return means.std(ddof=1) / np.sqrt(batches)


@pytest.mark.slow
def test_successive_conditional_simulation_recovers_prior(path_graph):
    # alternate a transition with a fresh response draw; parameter marginals then follow the prior
    rng = np.random.default_rng(11)
    I, T = 4, 3
    x = np.ones((I, T, 2))
    x[:, :, 1] = rng.normal(size=(I, T))
    config = quick_config(init="prior")
    base = config.base_measure(1)
    cache = PrecisionCache(path_graph)
    data = PanelData(["a", "b", "c", "d"], [1, 2, 3], np.zeros((I, T)), x)
    state = initial_state(data, cache, config, base, rng)
    steps = {"xi": AdaptiveStep(config.mh_step_xi), "rho": AdaptiveStep(config.mh_step_rho)}

    n = 100000
    trace = np.empty((n, 4))
    for it in range(n):
        data = draw_response(state, data, rng)
        state = sweep(state, data, path_graph, cache, config, base, steps, rng)
        trace[it] = (state.sigma2, state.tau2, state.rho, state.cluster.alpha)

    expected = (
        config.b_sigma2 / (config.a_sigma2 - 1),
        config.b_tau2 / (config.a_tau2 - 1),
        config.a_rho / (config.a_rho + config.b_rho),
        config.a_alpha / config.b_alpha,
    )
    for k, mean in enumerate(expected):
        assert abs(trace[:, k].mean() - mean) < 4 * _batch_se(trace[:, k])
