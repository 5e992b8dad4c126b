import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mlrbench.checks import finite_difference, gradient_gap
from mlrbench.critic import (
    CriticK,
    CriticSym,
    FeatureMap,
    c_transform,
    c_transform_bound,
    c_transform_oracle,
    feasibility_violation,
    logcosh,
    psi_k,
    psi_k_grads,
    psi_sym,
    psi_sym_grads,
    regularizer,
    with_feature_map,
)
from mlrbench.models import BracketError, ConfigError, DimensionError


@pytest.fixture
def critic():
    rng = np.random.default_rng(0)
    return CriticSym(rng.normal(0, 0.5, 3), rng.normal(0, 0.5, 3), rng.normal(0, 0.5, 3), lam=0.7)


def test_logcosh_is_stable():
    assert logcosh(np.array([1.0]))[0] == pytest.approx(0.4337808304830271, rel=1e-12)
    big = logcosh(np.array([700.0, -700.0, 1e6]))
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(700.0 - math.log(2.0))
    assert big[1] == big[0]


def test_psi_sym_examples(critic):
    c = CriticSym([1.0], [0.0], [0.0])
    assert psi_sym(c, [1.0], 1.0) == pytest.approx(0.4337809, abs=1e-7)
    assert psi_sym(critic, np.ones(3), 0.0) == 0.0
    same = CriticSym(critic.gamma1, critic.gamma1, critic.gamma_ref)
    assert_allclose(psi_sym(same, np.ones((4, 3)), np.arange(4.0)), 0.0)


def test_psi_sym_is_even_in_y(critic):
    x = np.array([0.3, -1.2, 2.0])
    for y in (0.1, 1.5, 40.0):
        assert psi_sym(critic, x, y) == pytest.approx(psi_sym(critic, x, -y), abs=1e-12)


def test_psi_sym_large_arguments():
    c = CriticSym([700.0], [-700.0], [0.0])
    assert psi_sym(c, [1.0], 1.0) == 0.0
    c = CriticSym([700.0], [0.0], [0.0])
    assert psi_sym(c, [1.0], 1.0) == pytest.approx(700.0 - math.log(2.0))


def test_psi_sym_batch_matches_single(critic):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 3))
    Y = rng.normal(size=5)
    batch = psi_sym(critic, X, Y)
    assert_allclose(batch, [psi_sym(critic, x, y) for x, y in zip(X, Y)])


def test_psi_sym_grads_examples(critic):
    dg1, dg2, dy = psi_sym_grads(critic, np.ones(3), 0.0)
    assert_allclose(dg1, 0.0)
    assert_allclose(dg2, 0.0)
    assert dy == 0.0
    same = CriticSym(critic.gamma1, critic.gamma1, critic.gamma_ref)
    assert psi_sym_grads(same, np.ones(3), 2.5)[2] == pytest.approx(0.0)


def test_psi_sym_grads_match_finite_differences(critic):
    x = np.array([0.4, -0.9, 1.3])
    y = 1.7
    dg1, dg2, dy = psi_sym_grads(critic, x, y)
    assert gradient_gap(dg1, finite_difference(lambda g: psi_sym(replace(critic, gamma1=g), x, y), critic.gamma1)) < 1e-6
    assert gradient_gap(dg2, finite_difference(lambda g: psi_sym(replace(critic, gamma2=g), x, y), critic.gamma2)) < 1e-6
    assert gradient_gap([dy], finite_difference(lambda t: psi_sym(critic, x, float(t[0])), np.array([y]))) < 1e-6


def test_psi_k_examples():
    c = CriticK(np.array([[1.0], [0.0], [-1.0], [0.0]]), np.zeros((2, 1)), sigma2=1.0)
    assert psi_k(c, [1.0], 0.0) == pytest.approx(-0.5, abs=1e-12)

    equal = CriticK(np.array([[0.3, 1.0], [0.3, 1.0]]), np.zeros((1, 2)))
    assert psi_k(equal, [1.0, -2.0], 0.7) == pytest.approx(0.0)

    one = CriticK(np.array([[0.5], [2.0]]), np.zeros((1, 1)), sigma2=2.0)
    y = 1.5
    expected = (y - 2.0) ** 2 / 4.0 - (y - 0.5) ** 2 / 4.0
    assert psi_k(one, [1.0], y) == pytest.approx(expected)


def test_psi_k_grads_match_finite_differences():
    rng = np.random.default_rng(2)
    c = CriticK(rng.normal(0, 0.7, (6, 2)), rng.normal(0, 0.5, (3, 2)), sigma2=1.3)
    x = rng.normal(size=2)
    y = 0.8
    d_gammas, dy = psi_k_grads(c, x, y)
    assert d_gammas.shape == (6, 2)
    assert gradient_gap(d_gammas, finite_difference(lambda g: psi_k(replace(c, gammas=g), x, y), c.gammas)) < 1e-6
    assert gradient_gap([dy], finite_difference(lambda t: psi_k(c, x, float(t[0])), np.array([y]))) < 1e-6


def test_critic_k_shape_validation():
    with pytest.raises(DimensionError):
        CriticK(np.ones((3, 2)), np.ones((1, 2)))
    with pytest.raises(DimensionError):
        CriticK(np.ones((4, 2)), np.ones((1, 2)))


def test_regularizer():
    ref = np.array([1.0, -2.0])
    value, (r1, r2) = regularizer(CriticSym(ref, ref, ref, lam=1.0))
    assert value == 0.0
    assert_allclose(r1, 0.0)
    assert_allclose(r2, 0.0)

    u = np.array([0.6, 0.8])
    value, (r1, r2) = regularizer(CriticSym(ref + u, ref, ref, lam=1.0))
    assert value == pytest.approx(1.0)
    assert_allclose(r1, 2 * u)
    assert_allclose(r2, 0.0)

    c = CriticK(np.array([[1.0], [3.0]]), np.array([[2.0]]), lam=0.5)
    value, grads = regularizer(c)
    assert value == pytest.approx(1.0)
    assert_allclose(grads, [[-1.0], [1.0]])


def test_two_component_critic_matches_symmetric_up_to_y_free_term():
    rng = np.random.default_rng(11)
    a, b = rng.normal(0, 0.6, 3), rng.normal(0, 0.6, 3)
    sym = CriticSym(a, b, np.zeros(3))
    general = CriticK(np.stack([a, b, -a, -b]), np.zeros((2, 3)), sigma2=1.0)
    xs = rng.normal(size=(50, 3))
    shift = -((xs @ a) ** 2 - (xs @ b) ** 2) / 2
    for y in (-2.0, 0.0, 0.4, 3.5):
        assert_allclose(psi_k(general, xs, y) - psi_sym(sym, xs, y), shift, atol=1e-10)
    ys = rng.normal(0, 2.0, 50)
    _, dy_general = psi_k_grads(general, xs, ys)
    _, _, dy_sym = psi_sym_grads(sym, xs, ys)
    assert_allclose(dy_general, dy_sym, atol=1e-10)


@pytest.mark.parametrize("general", [False, True])
def test_regularizer_is_convex(general):
    rng = np.random.default_rng(12)

    def build(g):
        if general:
            return CriticK(g.reshape(4, 2), np.array([[0.3, -0.2], [1.0, 0.5]]), lam=0.8)
        return CriticSym(g[:2], g[2:4], np.array([0.3, -0.2]), lam=0.8)

    for _ in range(50):
        g, h = rng.normal(0, 2.0, 8), rng.normal(0, 2.0, 8)
        t = rng.uniform()
        mixed = regularizer(build(t * g + (1 - t) * h))[0]
        assert mixed <= t * regularizer(build(g))[0] + (1 - t) * regularizer(build(h))[0] + 1e-12


def test_critic_rejects_bad_lambda():
    with pytest.raises(ConfigError):
        CriticSym([1.0], [1.0], [1.0], lam=0.0)


def test_c_transform_oracle_examples():
    assert c_transform_oracle(lambda t: np.zeros_like(t), 0.4, 5.0) == pytest.approx(0.0, abs=1e-12)
    a, y = 0.7, -1.2
    assert c_transform_oracle(lambda t: a * t, y, 5.0) == pytest.approx(a * y + a * a / 2, abs=1e-9)


def test_c_transform_oracle_widens_bracket():
    a, y = 6.0, 0.0
    # the maximizer y + a lies outside the first bracket
    assert c_transform_oracle(lambda t: a * t, y, 1.0) == pytest.approx(a * a / 2, abs=1e-9)


def test_c_transform_oracle_gives_up():
    with pytest.raises(BracketError):
        c_transform_oracle(lambda t: 1000.0 * t, 0.0, 1.0, max_doublings=2)


def test_c_transform_dominates_psi(critic):
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.normal(size=3)
        y = float(rng.normal(0, 2))
        assert c_transform(critic, x, y) >= psi_sym(critic, x, y) - 1e-9


def test_c_transform_bound_requires_small_gammas(critic):
    xs = np.ones((4, 3)) / math.sqrt(3)
    ys = np.array([0.5, -0.2, 1.0, 0.0])
    with pytest.raises(ConfigError):
        c_transform_bound(CriticSym([10.0, 0, 0], [0, 0, 0], [0, 0, 0]), xs, ys, 1.0)
    small = CriticSym([0.1, 0, 0], [0, 0.1, 0], [0, 0, 0])
    assert c_transform_bound(small, xs, ys, 1.0) > 0


def test_feasibility_violation(caplog):
    c = CriticSym([1.0, 0.0], [0.0, 0.0], [0.0, 0.0])
    assert not feasibility_violation(c, C=0.1, eta=1.0)
    assert feasibility_violation(c, C=1.0, eta=1.0)
    assert "feasibility" in caplog.text


def test_with_feature_map_identity(critic):
    x = np.array([0.2, 1.0, -0.5])
    mapped = with_feature_map(critic, FeatureMap(lambda v: v, 3))
    assert psi_sym(mapped, x, 1.3) == pytest.approx(psi_sym(critic, x, 1.3))


def test_with_feature_map_scaling(critic):
    x = np.array([0.2, 1.0, -0.5])
    doubled = with_feature_map(critic, FeatureMap(lambda v: 2 * v, 3))
    scaled = CriticSym(2 * critic.gamma1, 2 * critic.gamma2, critic.gamma_ref)
    assert psi_sym(doubled, x, 0.9) == pytest.approx(psi_sym(scaled, x, 0.9))


def test_with_feature_map_dimension_mismatch(critic):
    with pytest.raises(DimensionError):
        with_feature_map(critic, FeatureMap(lambda v: np.concatenate([v, v]), 6))
