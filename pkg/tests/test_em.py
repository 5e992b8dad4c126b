import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mlrbench.checks import finite_difference, gradient_gap
from mlrbench.mlr_model import Dataset, GenConfig, MLRParams, bayes_posterior, draw_beta_star, generate_dataset
from mlrbench.models import ConfigError, SingularCovarianceError
from mlrbench.solvers.em import (
    EMConfig,
    EMSolver,
    EMState,
    GEMConfig,
    GEMSolver,
    e_weights,
    gem_grads,
    initial_em_state,
    m_step,
    q_function,
    run_em,
    run_gem,
    second_moment,
)


@pytest.fixture
def data():
    params = MLRParams.symmetric(draw_beta_star(4, 2.0, 0), 1.0)
    return generate_dataset(GenConfig(n=300, d=4, snr=2.0, seed=0), params)


@pytest.fixture
def old():
    return EMState(np.array([0.5, -0.3, 1.0, 0.2]), 1.3)


def test_state_requires_positive_variance():
    with pytest.raises(ConfigError):
        EMState(np.zeros(2), 0.0)


def test_config_round_trip():
    assert EMConfig.from_dict(EMConfig(T=7).to_dict()) == EMConfig(T=7)
    assert GEMConfig.from_dict(GEMConfig(alpha=0.3).to_dict()) == GEMConfig(alpha=0.3)
    with pytest.raises(ConfigError):
        GEMConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        EMConfig.from_dict({"alpha": 1.0})


def test_e_weights_examples():
    state = EMState(np.array([1.0]), 1.0)
    data = Dataset(xs=np.array([[1.0], [1.0], [0.0]]), ys=np.array([1.0, 0.0, 2.0]))
    assert_allclose(e_weights(state, data), [0.880797077977882, 0.5, 0.5], rtol=1e-12)


def test_e_weights_match_posterior(data, old):
    params = MLRParams.symmetric(old.beta, old.sigma2)
    assert_allclose(e_weights(old, data), bayes_posterior(params, data.xs, data.ys)[:, 0], atol=1e-12)


def test_q_function_half_weights(data):
    new = EMState(np.zeros(4), 2.0)
    w = np.full(data.n, 0.5)
    expected = -0.5 * math.log(2.0) - np.mean(data.ys ** 2) / (2 * 2.0)
    assert q_function(new, new, data, w) == pytest.approx(expected)


def test_q_function_scalar_reimplementation():
    new = EMState(np.array([0.1, 0.2]), 0.7)
    xs = np.array([[1.0, 0.0], [0.5, -1.0], [2.0, 0.3], [-0.4, 0.9], [0.0, 1.0]])
    ys = np.array([0.3, -1.2, 2.0, 0.1, -0.5])
    prev = EMState(np.array([0.4, -0.6]), 1.1)
    total = 0.0
    for x, y in zip(xs, ys):
        u_old = x[0] * prev.beta[0] + x[1] * prev.beta[1]
        a = math.exp(-((y - u_old) ** 2) / (2 * prev.sigma2))
        b = math.exp(-((y + u_old) ** 2) / (2 * prev.sigma2))
        w = a / (a + b)
        u = x[0] * new.beta[0] + x[1] * new.beta[1]
        total += w * (y - u) ** 2 + (1 - w) * (y + u) ** 2
    expected = -0.5 * math.log(new.sigma2) - total / (2 * new.sigma2 * len(ys))
    assert q_function(new, prev, Dataset(xs=xs, ys=ys)) == pytest.approx(expected, abs=1e-12)


def test_q_function_rejects_bad_variance(data, old):
    bad = EMState(np.zeros(4), 1.0)
    object.__setattr__(bad, "sigma2", -1.0)
    with pytest.raises(ConfigError):
        q_function(bad, old, data)
    with pytest.raises(ConfigError):
        gem_grads(bad, old, data)


def test_m_step_saturated_weights_is_ols():
    # large positive y * beta'x drives every weight to 1
    xs = np.array([[1.0, 0.2], [0.5, 1.0], [2.0, -0.3], [1.5, 0.7]])
    ys = np.array([3.0, 2.5, 5.0, 4.0])
    old = EMState(np.array([100.0, 100.0]), 1e-3)
    data = Dataset(xs=xs, ys=ys)
    assert_allclose(e_weights(old, data), 1.0)
    new = m_step(old, data)
    ols = np.linalg.solve(xs.T @ xs / 4, xs.T @ ys / 4)
    assert_allclose(new.beta, ols, rtol=1e-10)


def test_m_step_noiseless_single_cluster_hits_floor():
    xs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    beta = np.array([2.0, -1.0])
    data = Dataset(xs=xs, ys=xs @ beta)
    old = EMState(beta, 1e-4)
    new = m_step(old, data)
    assert_allclose(new.beta, beta, atol=1e-10)
    assert new.sigma2 == 1e-8


def test_m_step_is_stationary(data, old):
    new = m_step(old, data)
    d_beta, d_sigma2 = gem_grads(new, old, data)
    assert np.linalg.norm(d_beta) <= 1e-9
    assert abs(d_sigma2) <= 1e-9


def test_m_step_ascent(data, old):
    assert q_function(m_step(old, data), old, data) >= q_function(old, old, data)


def test_m_step_singular_covariance():
    data = Dataset(xs=np.ones((5, 2)), ys=np.arange(5.0))
    with pytest.raises(SingularCovarianceError):
        m_step(EMState(np.ones(2), 1.0), data)
    with pytest.raises(SingularCovarianceError):
        m_step(EMState(np.ones(3), 1.0), Dataset(xs=np.ones((2, 3)), ys=np.ones(2)))


def test_m_step_known_covariance(data, old):
    a = m_step(old, data, sigma_x=second_moment(data))
    b = m_step(old, data)
    assert_allclose(a.beta, b.beta)
    with pytest.raises(ConfigError):
        m_step(old, data, sigma_x=np.eye(3))


def test_gem_grads_match_finite_differences(data, old):
    new = EMState(np.array([0.2, 0.1, -0.4, 0.9]), 0.8)
    d_beta, d_sigma2 = gem_grads(new, old, data)
    fd_beta = finite_difference(lambda b: q_function(EMState(b, new.sigma2), old, data), new.beta)
    fd_sigma2 = finite_difference(lambda s: q_function(EMState(new.beta, float(s[0])), old, data), np.array([0.8]))
    assert gradient_gap(d_beta, fd_beta) <= 1e-6
    assert gradient_gap([d_sigma2], fd_sigma2) <= 1e-6


def test_gem_grads_half_weights(data):
    new = EMState(np.array([0.3, -0.2, 0.5, 0.1]), 1.7)
    d_beta, _ = gem_grads(new, new, data, w=np.full(data.n, 0.5))
    assert_allclose(d_beta, -(second_moment(data) @ new.beta) / new.sigma2, atol=1e-12)


def test_run_em_fixed_point(data):
    # beta = 0 with sigma2 = mean(y^2) is stationary: every weight is 1/2
    fixed = EMState(np.zeros(4), float(np.mean(data.ys ** 2)))
    again, _ = run_em(data, fixed, T=3)
    assert_allclose(again.beta, fixed.beta, atol=1e-10)
    assert again.sigma2 == pytest.approx(fixed.sigma2, abs=1e-10)


def test_run_em_monotone_ascent(data):
    init = initial_em_state(4, seed=1)
    state = init
    for _ in range(20):
        new = m_step(state, data)
        assert q_function(new, state, data) >= q_function(state, state, data) - 1e-10
        state = new
    final, trace = run_em(data, init, T=20)
    assert_allclose(final.beta, state.beta, rtol=1e-12)
    assert len(trace) == 21


def test_run_em_sign_equivariant(data):
    init = initial_em_state(4, seed=2)
    a, _ = run_em(data, init, T=10)
    b, _ = run_em(data, EMState(-init.beta, init.sigma2), T=10)
    assert_allclose(b.beta, -a.beta, atol=1e-12)
    assert b.sigma2 == pytest.approx(a.sigma2)


def test_run_em_trace_rows(data):
    beta_star = draw_beta_star(4, 2.0, 0)
    _, trace = run_em(data, initial_em_state(4, seed=3), T=4, beta_star=beta_star)
    assert [r.iter for r in trace.rows] == [0, 1, 2, 3, 4]
    assert all(r.rel_err is not None and r.nll is not None for r in trace.rows)
    assert trace.rows[0].data_term is None


def test_run_gem_small_alpha_freezes(data, old):
    state, _ = run_gem(data, old, GEMConfig(alpha=1e-14, T=10))
    assert_allclose(state.beta, old.beta, atol=1e-12)
    assert state.sigma2 == pytest.approx(old.sigma2)


def test_gem_steps_approach_m_step(data, old):
    target = m_step(old, data)
    state = old
    for _ in range(5000):
        d_beta, d_sigma2 = gem_grads(state, old, data)
        state = EMState(state.beta + 0.5 * d_beta, max(state.sigma2 + 0.5 * d_sigma2, 1e-8))
    assert_allclose(state.beta, target.beta, atol=1e-4)
    assert state.sigma2 == pytest.approx(target.sigma2, abs=1e-4)


def test_run_gem_floor_projection(data):
    # sigma2 above the residual variance gets a negative gradient; a huge step overshoots zero
    init = EMState(np.zeros(4), 10.0)
    state, _ = run_gem(data, init, GEMConfig(alpha=1000.0, T=1))
    assert state.sigma2 == 1e-8
    assert_array_equal(state.beta, 0.0)


def test_solvers_return_results(data):
    em = EMSolver(EMConfig(T=3)).run(data)
    gem = GEMSolver(GEMConfig(alpha=0.5, T=3)).run(data)
    assert em.algorithm == "em" and gem.algorithm == "gem"
    assert len(em.trace) == 4 and len(gem.trace) == 4
    assert em.sigma2 > 0 and gem.sigma2 > 0
