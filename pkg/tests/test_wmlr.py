import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mlrbench.checks import objective_gaps
from mlrbench.critic import CriticK, CriticSym, FeatureMap, psi_sym
from mlrbench.mlr_model import Dataset, GenConfig, MLRParams, draw_beta_star, generate_dataset
from mlrbench.models import ConfigError, SolverError
from mlrbench.solvers.wmlr import (
    WMLRConfig,
    WMLRSolver,
    WMLRState,
    draw_model_noise,
    gda_step,
    initial_state,
    inner_maximize,
    model_samples,
    objective,
    power_iterate,
    reference_vector,
    run_wmlr,
    theory_stepsizes,
)


def _data(n=200, d=4, snr=2.0, seed=0, x_bound=None):
    params = MLRParams.symmetric(draw_beta_star(d, snr, seed), 1.0)
    return generate_dataset(GenConfig(n=n, d=d, snr=snr, x_bound=x_bound, seed=seed), params), params.beta_star


def test_config_defaults():
    cfg = WMLRConfig(lam=0.5)
    assert cfg.alpha_max == pytest.approx(1.0)
    assert cfg.alpha_min == pytest.approx(0.1)
    assert WMLRConfig.from_dict(cfg.to_dict()) == cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        WMLRConfig(lam=0.0)
    with pytest.raises(ConfigError):
        WMLRConfig(T=-1)
    with pytest.raises(ConfigError):
        WMLRConfig(k=3, symmetric=True)
    with pytest.raises(ConfigError):
        WMLRConfig.from_dict({"lambda": 0.5})


def test_reference_vector_rank_one():
    xs = np.tile([1.0, 0.0, 0.0], (5, 1))
    data = Dataset(xs=xs, ys=np.array([1.0, -2.0, 0.5, 3.0, 1.0]))
    assert_allclose(reference_vector(data), [1.0, 0.0, 0.0], atol=1e-12)


def test_reference_vector_axis_aligned():
    data = Dataset(xs=np.eye(2), ys=np.array([math.sqrt(3.0), 1.0]))
    assert_allclose(reference_vector(data), [1.0, 0.0], atol=1e-9)


def test_reference_vector_zero_matrix():
    with pytest.raises(SolverError):
        reference_vector(Dataset(xs=np.eye(3), ys=np.zeros(3)))


def test_reference_vector_aligns_with_truth():
    data, beta_star = _data(n=100_000, d=16, snr=10.0, seed=3)
    ref = reference_vector(data)
    assert np.linalg.norm(ref) == pytest.approx(1.0)
    assert abs(ref @ beta_star) / np.linalg.norm(beta_star) >= 0.95


def test_reference_vector_off_the_ones_direction():
    xs = np.array([[1.0, -1.0], [1.0, 1.0]]) / math.sqrt(2.0)
    data = Dataset(xs=xs, ys=np.array([3.0, 1.0]))
    top = np.array([1.0, -1.0]) / math.sqrt(2.0)
    for seed in range(5):
        ref = reference_vector(data, seed=seed)
        assert abs(ref @ top) == pytest.approx(1.0, abs=1e-9)
        assert_allclose(ref, top, atol=1e-9)


def test_power_iterate_start_is_seeded():
    scales = np.array([3.0, 1.0, 0.5])
    v, steps = power_iterate(lambda u: scales * u, 3, seed=4)
    assert_allclose(v, [1.0, 0.0, 0.0], atol=1e-9)
    again, again_steps = power_iterate(lambda u: scales * u, 3, seed=4)
    assert_array_equal(again, v)
    assert again_steps == steps
    _, first = power_iterate(lambda u: scales * u, 3, iters=1, seed=4)
    assert first == 1


def test_model_samples_fixed_noise():
    data, _ = _data()
    state = initial_state(data, WMLRConfig(seed=1))
    assert_array_equal(model_samples(state, data, 1.0), model_samples(state, data, 1.0))
    zero = replace(state, beta=np.zeros(data.d))
    assert_allclose(model_samples(zero, data, 1e-300), 0.0, atol=1e-140)


def test_objective_decomposition():
    data, _ = _data()
    cfg = WMLRConfig(seed=2, init_scale=0.5)
    ev = objective(data, initial_state(data, cfg), cfg)
    assert ev.value == pytest.approx(ev.data_term - ev.model_term - ev.reg_term, abs=1e-10)


def test_objective_equal_gammas():
    data, _ = _data()
    cfg = WMLRConfig(seed=2)
    state = initial_state(data, cfg)
    c = state.critic
    state = replace(state, critic=CriticSym(c.gamma1, c.gamma1, c.gamma_ref, lam=c.lam))
    ev = objective(data, state, cfg)
    assert ev.value == pytest.approx(-ev.reg_term)
    assert_allclose(ev.grad_beta, 0.0, atol=1e-15)


@pytest.mark.parametrize("sym", [True, False])
def test_objective_gradients_match_finite_differences(sym):
    k = 2 if sym else 3
    data, _ = _data(n=60)
    cfg = WMLRConfig(lam=0.5, k=k, symmetric=sym, seed=4, init_scale=0.5)
    state = initial_state(data, cfg)
    assert max(objective_gaps(data, state, cfg)) <= 1e-6


def test_two_component_objective_matches_symmetric():
    data, _ = _data(n=300, d=3, seed=8)
    rng = np.random.default_rng(8)
    beta, a, b, ref = (rng.normal(0, 0.5, 3) for _ in range(4))
    noise = draw_model_noise(8, data.n)
    sym_cfg = WMLRConfig(lam=0.6, seed=8)
    sym = WMLRState(beta=beta, critic=CriticSym(a, b, ref, lam=0.6), model_noise=noise)
    general_cfg = WMLRConfig(lam=0.6, k=2, symmetric=False, seed=8)
    general = WMLRState(
        beta=np.stack([beta, -beta]),
        critic=CriticK(np.stack([a, b, -a, -b]), np.stack([ref, -ref]), lam=0.6, sigma2=1.0),
        model_noise=noise,
        model_latent=np.ones(data.n, dtype=int),
    )
    ev_sym = objective(data, sym, sym_cfg)
    ev_general = objective(data, general, general_cfg)
    assert ev_general.data_term - ev_general.model_term == pytest.approx(
        ev_sym.data_term - ev_sym.model_term, abs=1e-10)
    assert ev_general.reg_term == pytest.approx(2 * ev_sym.reg_term)
    assert_allclose(ev_general.grad_beta[0], ev_sym.grad_beta, atol=1e-10)
    assert_allclose(ev_general.grad_beta[1], 0.0)


def test_swapping_data_and_model_negates_the_fit_terms():
    data, beta_star = _data(n=500, d=3, seed=9)
    cfg = WMLRConfig(seed=9, init_scale=0.5)
    state = replace(initial_state(data, cfg), beta=beta_star)
    signs = np.where(data.zs == 1, 1.0, -1.0)
    swapped_data = Dataset(xs=data.xs, ys=model_samples(state, data, 1.0))
    swapped_state = replace(state, model_noise=signs * data.ys - data.xs @ beta_star)
    ev = objective(data, state, cfg)
    ev_swapped = objective(swapped_data, swapped_state, cfg)
    assert ev_swapped.data_term == pytest.approx(ev.model_term, abs=1e-12)
    assert ev_swapped.model_term == pytest.approx(ev.data_term, abs=1e-12)
    assert ev_swapped.data_term - ev_swapped.model_term == pytest.approx(
        -(ev.data_term - ev.model_term), abs=1e-12)


@pytest.mark.slow
def test_fit_terms_vanish_at_truth_in_both_orientations():
    data, beta_star = _data(n=100_000, d=3, seed=10)
    cfg = WMLRConfig(seed=10, init_scale=0.5)
    state = replace(initial_state(data, cfg), beta=beta_star)
    signs = np.where(data.zs == 1, 1.0, -1.0)
    swapped_data = Dataset(xs=data.xs, ys=model_samples(state, data, 1.0))
    swapped_state = replace(state, model_noise=signs * data.ys - data.xs @ beta_star)
    _, ev = inner_maximize(data, state, cfg)
    _, ev_swapped = inner_maximize(swapped_data, swapped_state, cfg)
    assert abs(ev.data_term - ev.model_term) <= 1e-2
    assert abs(ev_swapped.data_term - ev_swapped.model_term) <= 1e-2


@pytest.mark.slow
def test_gradient_at_truth_shrinks_like_inverse_root_n():
    sizes = [1_000, 10_000, 100_000]
    norms = []
    for n in sizes:
        per_seed = []
        for seed in range(8):
            data, beta_star = _data(n=n, d=3, snr=2.0, seed=seed)
            cfg = WMLRConfig(lam=1.0, seed=100 + seed)
            state = replace(initial_state(data, cfg), beta=beta_star)
            _, ev = inner_maximize(data, state, cfg, tol=1e-10)
            per_seed.append(np.linalg.norm(ev.grad_beta))
        norms.append(np.mean(per_seed))
    slope = np.polyfit(np.log10(sizes), np.log10(norms), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_objective_matched_noise_at_truth():
    data, beta_star = _data(n=100_000, d=4, snr=2.0, seed=5)
    cfg = WMLRConfig(seed=6, init_scale=0.5)
    state = replace(initial_state(data, cfg, gamma_ref=np.ones(4) / 2), beta=beta_star)
    ev = objective(data, state, cfg)
    # the per-sample spread bounds the standard error of data_term - model_term
    diff = psi_sym(state.critic, data.xs, data.ys) - psi_sym(state.critic, data.xs, model_samples(state, data, 1.0))
    stderr = float(np.std(diff)) / math.sqrt(data.n)
    assert abs(ev.data_term - ev.model_term) <= 4 * stderr


def test_gda_step_zero_gradients_leave_state_unchanged():
    data, _ = _data()
    cfg = WMLRConfig(seed=7)
    ref = reference_vector(data)
    beta = np.array([0.3, -0.1, 0.2, 0.5])
    noise = draw_model_noise(cfg.seed, data.n)
    # data drawn from the model's own noise makes the data and model terms cancel
    matched = Dataset(xs=data.xs, ys=data.xs @ beta + noise)
    state = WMLRState(beta=beta, critic=CriticSym(ref, ref, ref, lam=cfg.lam), model_noise=noise)
    new = gda_step(state, matched, cfg)
    assert_allclose(new.beta, state.beta, atol=1e-15)
    assert_allclose(new.critic.gamma1, ref, atol=1e-15)
    assert_allclose(new.critic.gamma2, ref, atol=1e-15)
    assert new.iter == 1


def test_gda_step_frozen_beta():
    data, _ = _data()
    cfg = WMLRConfig(seed=8, alpha_min=0.0, alpha_max=0.5)
    state = initial_state(data, cfg)
    new = gda_step(state, data, cfg)
    assert_array_equal(new.beta, state.beta)
    assert not np.allclose(new.critic.gamma1, state.critic.gamma1)


def test_gda_step_is_deterministic():
    data, _ = _data()
    cfg = WMLRConfig(seed=9)
    state = initial_state(data, cfg)
    a, b = gda_step(state, data, cfg), gda_step(state, data, cfg)
    assert_array_equal(a.beta, b.beta)
    assert_array_equal(a.critic.gamma1, b.critic.gamma1)


def test_gda_step_non_finite_raises():
    data, _ = _data()
    cfg = WMLRConfig(seed=9)
    state = replace(initial_state(data, cfg), beta=np.full(data.d, np.nan), iter=7)
    with pytest.raises(SolverError) as excinfo:
        gda_step(state, data, cfg)
    assert excinfo.value.iteration == 7


def test_resample_mode_refreshes_noise():
    data, _ = _data()
    cfg = WMLRConfig(seed=10, noise_mode="resample")
    state = initial_state(data, cfg)
    new = gda_step(state, data, cfg)
    assert not np.array_equal(new.model_noise, state.model_noise)
    fixed = gda_step(state, data, replace(cfg, noise_mode="fixed"))
    assert_array_equal(fixed.model_noise, state.model_noise)


def test_critic_ascent_has_unique_maximizer():
    data, _ = _data(n=200, d=3, snr=1.0, x_bound=1.0, seed=11)
    ref = reference_vector(data)
    lam = 2 * theory_stepsizes(data, 1.0, ref).eta + 1.0
    cfg = WMLRConfig(lam=lam, seed=11)
    finals = []
    for start in (0, 1):
        rng = np.random.default_rng(start)
        state = initial_state(data, cfg, gamma_ref=ref)
        critic = CriticSym(rng.normal(size=3), rng.normal(size=3), ref, lam=lam)
        state, _ = inner_maximize(data, replace(state, critic=critic), cfg, tol=1e-10)
        finals.append(np.concatenate([state.critic.gamma1, state.critic.gamma2]))
    assert_allclose(finals[0], finals[1], atol=1e-6)


def test_run_wmlr_zero_iterations():
    data, beta_star = _data()
    cfg = WMLRConfig(T=0, seed=12)
    init = initial_state(data, cfg)
    state, trace = run_wmlr(data, cfg, init=init, beta_star=beta_star)
    assert_array_equal(state.beta, init.beta)
    assert len(trace) == 1
    assert trace.rows[0].iter == 0


def test_run_wmlr_trace_rows():
    data, beta_star = _data()
    cfg = WMLRConfig(T=5, seed=13)
    _, trace = run_wmlr(data, cfg, beta_star=beta_star)
    assert [r.iter for r in trace.rows] == list(range(6))
    for row in trace.rows:
        assert row.objective == pytest.approx(row.data_term - row.model_term - row.reg_term, abs=1e-10)
        assert row.rel_err is not None and row.nll is not None


def test_run_wmlr_is_reproducible():
    data, _ = _data()
    cfg = WMLRConfig(T=10, seed=14)
    a, _ = run_wmlr(data, cfg)
    b, _ = run_wmlr(data, cfg)
    assert_array_equal(a.beta, b.beta)


def test_run_wmlr_general_k():
    data, _ = _data(n=80, d=3)
    cfg = WMLRConfig(T=3, k=3, symmetric=False, seed=15)
    state, trace = run_wmlr(data, cfg)
    assert state.beta.shape == (3, 3)
    assert len(trace) == 4


def test_run_wmlr_with_feature_map():
    data, _ = _data(n=50, d=2)
    phi = FeatureMap(lambda X: np.hstack([X, X ** 2]), 4, vectorized=True)
    result = WMLRSolver(WMLRConfig(T=2, seed=16), feature_map=phi).run(data)
    assert result.beta.shape == (4,)
    assert len(result.trace) == 3


def test_theory_stepsizes_small_eta():
    data = Dataset(xs=np.eye(2), ys=np.array([1e-8, 1e-8]))
    steps = theory_stepsizes(data, 0.5, np.zeros(2))
    assert steps.valid
    assert steps.L_smooth == pytest.approx(0.5)
    assert steps.kappa == pytest.approx(1.0)
    assert steps.alpha_max == pytest.approx(2.0)


def test_theory_stepsizes_formulas():
    data = Dataset(xs=np.array([[0.1, 0.2], [0.0, -0.3]]), ys=np.array([0.5, -1.0]))
    ref = np.array([0.6, 0.8])
    lam = 1.0
    steps = theory_stepsizes(data, lam, ref)
    C = 0.3
    eta = C ** 2 * (0.25 + 1.0) / 2
    L = lam + 4 * eta * (1 + eta / lam + 1.0)
    kappa = L / (lam - 2 * eta)
    assert steps.eta == pytest.approx(eta)
    assert steps.L_smooth == pytest.approx(L)
    assert steps.kappa == pytest.approx(kappa)
    assert steps.alpha_max == pytest.approx(1 / L)
    assert steps.alpha_min == pytest.approx(1 / (kappa ** 2 * L))


def test_theory_stepsizes_boundary():
    data = Dataset(xs=np.array([[1.0, 0.0]]), ys=np.array([1.0]))
    assert not theory_stepsizes(data, 2.0, np.zeros(2)).valid


@pytest.mark.slow
def test_run_wmlr_recovers_one_dimensional_regressor():
    recovered = 0
    for seed in range(20):
        data, beta_star = _data(n=50_000, d=1, snr=2.0, seed=seed)
        _, trace = run_wmlr(data, WMLRConfig(T=200, seed=seed), beta_star=beta_star)
        recovered += trace.final.rel_err <= 1e-2
    assert recovered >= 19


def test_quadratic_feature_map_recovers_coefficient():
    rng = np.random.default_rng(19)
    xs = rng.uniform(-1.5, 1.5, size=(2_000, 1))
    signs = rng.choice([-1.0, 1.0], size=2_000)
    data = Dataset(xs=xs, ys=signs * xs[:, 0] ** 2)
    phi = FeatureMap(lambda X: X ** 2, 1, vectorized=True)
    cfg = WMLRConfig(lam=2.0, T=1_500, sigma2=1e-8, seed=19)
    _, trace = run_wmlr(data, cfg, beta_star=np.array([1.0]), feature_map=phi)
    assert trace.final.rel_err <= 1e-2
