"""Discriminator functions psi and their analytic gradients.

Two families are supported:

* ``CriticSym``: the symmetric two-component form with the ``2 sigma^2`` scale
  absorbed into the gammas: ``psi = logcosh(y g1'x) - logcosh(y g2'x)``.
* ``CriticK``: the general k-component log-ratio of Gaussian mixtures. Rows
  ``0, 2, 4, ...`` of ``gammas`` are the numerator vectors and rows
  ``1, 3, 5, ...`` the denominator vectors; both members of pair ``i`` are
  regularized towards ``gamma_ref[i]``.

All evaluation functions accept a single sample (``x`` of shape ``(d,)``, scalar
``y``) or a batch (``x`` of shape ``(n, d)``, ``y`` of shape ``(n,)``). A single
``x`` with an array of ``y`` values evaluates ``psi(x, .)`` on all of them.

The regularizer uses the weight ``lam`` directly; the ``lam / 2`` convention
is obtained by halving ``lam``.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, softmax

from mlrbench.models import BracketError, ConfigError, DimensionError

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A fixed map ``phi`` from inputs to ``d_out``-dimensional features.

    ``phi`` takes one input vector unless ``vectorized`` is set, in which case it
    is called once on the whole ``(n, d)`` batch.
    """
    phi: Callable[[np.ndarray], np.ndarray]
    d_out: int
    vectorized: bool = False

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self.vectorized:
            out = np.asarray(self.phi(X), dtype=float)
        else:
            out = np.asarray([np.asarray(self.phi(row), dtype=float).ravel() for row in X])
        out = out.reshape(X.shape[0], -1)
        if out.shape[1] != self.d_out:
            raise DimensionError(f"feature map produced dimension {out.shape[1]}, declared {self.d_out}")
        return out


@dataclass(frozen=True, eq=False)
class CriticSym:
    gamma1: np.ndarray
    gamma2: np.ndarray
    gamma_ref: np.ndarray
    lam: float = 0.5
    feature_map: Optional[FeatureMap] = None

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma_ref"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not (self.gamma1.shape == self.gamma2.shape == self.gamma_ref.shape):
            raise DimensionError(
                f"gamma shapes differ: {self.gamma1.shape}, {self.gamma2.shape}, {self.gamma_ref.shape}"
            )
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")

    @property
    def d(self) -> int:
        return self.gamma1.shape[0]

    @property
    def k(self) -> int:
        return 2

    def max_gamma_norm(self) -> float:
        return float(max(np.linalg.norm(self.gamma1), np.linalg.norm(self.gamma2)))


@dataclass(frozen=True, eq=False)
class CriticK:
    gammas: np.ndarray
    gamma_ref: np.ndarray
    lam: float = 0.5
    sigma2: float = 1.0
    feature_map: Optional[FeatureMap] = None

    def __post_init__(self):
        gammas = np.atleast_2d(np.asarray(self.gammas, dtype=float))
        gamma_ref = np.atleast_2d(np.asarray(self.gamma_ref, dtype=float))
        if gammas.shape[0] % 2 or gammas.shape[0] < 2:
            raise DimensionError(f"need 2k gamma vectors, got {gammas.shape[0]}")
        if gamma_ref.shape != (gammas.shape[0] // 2, gammas.shape[1]):
            raise DimensionError(
                f"gamma_ref must have shape {(gammas.shape[0] // 2, gammas.shape[1])}, got {gamma_ref.shape}"
            )
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "gammas", gammas)
        object.__setattr__(self, "gamma_ref", gamma_ref)

    @property
    def k(self) -> int:
        return self.gammas.shape[0] // 2

    @property
    def d(self) -> int:
        return self.gammas.shape[1]

    @property
    def numer(self) -> np.ndarray:
        return self.gammas[0::2]

    @property
    def denom(self) -> np.ndarray:
        return self.gammas[1::2]

    def max_gamma_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.gammas, axis=1)))


Critic = Union[CriticSym, CriticK]


def _features(c: Critic, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if c.feature_map is not None:
        X = c.feature_map.apply(X)
    if X.shape[1] != c.d:
        raise DimensionError(f"features have dimension {X.shape[1]}, critic has {c.d}")
    return X, single


def _shape_out(values: np.ndarray, single: bool, y) -> Union[float, np.ndarray]:
    if single and np.ndim(y) == 0:
        return float(values[0])
    return values


def logcosh(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    return a - LOG2 + np.log1p(np.exp(-2.0 * a))


def psi_sym(c: CriticSym, x, y) -> Union[float, np.ndarray]:
    X, single = _features(c, x)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    out = logcosh(Y * (X @ c.gamma1)) - logcosh(Y * (X @ c.gamma2))
    return _shape_out(out, single, y)


def psi_sym_grads(c: CriticSym, x, y):
    """Returns ``(d_gamma1, d_gamma2, d_y)``; per-sample rows for batched input."""
    X, single = _features(c, x)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    u1 = X @ c.gamma1
    u2 = X @ c.gamma2
    th1 = np.tanh(Y * u1)
    th2 = np.tanh(Y * u2)
    d_gamma1 = (th1 * Y)[:, None] * X
    d_gamma2 = -(th2 * Y)[:, None] * X
    d_y = th1 * u1 - th2 * u2
    if single and np.ndim(y) == 0:
        return d_gamma1[0], d_gamma2[0], float(d_y[0])
    return d_gamma1, d_gamma2, d_y


def _psi_k_terms(c: CriticK, X: np.ndarray, Y: np.ndarray):
    """Softmax weights and scaled residuals for numerator (a, ra) and denominator (b, rb)."""
    res_num = Y[:, None] - X @ c.numer.T
    res_den = Y[:, None] - X @ c.denom.T
    logit_num = -(res_num ** 2) / (2.0 * c.sigma2)
    logit_den = -(res_den ** 2) / (2.0 * c.sigma2)
    value = logsumexp(logit_num, axis=1) - logsumexp(logit_den, axis=1)
    a = softmax(logit_num, axis=1)
    b = softmax(logit_den, axis=1)
    return value, a, res_num / c.sigma2, b, res_den / c.sigma2


def psi_k(c: CriticK, x, y) -> Union[float, np.ndarray]:
    X, single = _features(c, x)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    value, *_ = _psi_k_terms(c, X, np.broadcast_to(Y, (max(X.shape[0], Y.shape[0]),)))
    return _shape_out(value, single, y)


def psi_k_grads(c: CriticK, x, y):
    """Returns ``(d_gammas, d_y)`` with ``d_gammas`` laid out like ``c.gammas``."""
    X, single = _features(c, x)
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    n = max(X.shape[0], Y.shape[0])
    Y = np.broadcast_to(Y, (n,))
    X = np.broadcast_to(X, (n, X.shape[1]))
    _, a, ra, b, rb = _psi_k_terms(c, X, Y)
    d_gammas = np.empty((n, 2 * c.k, c.d))
    d_gammas[:, 0::2, :] = (a * ra)[:, :, None] * X[:, None, :]
    d_gammas[:, 1::2, :] = -(b * rb)[:, :, None] * X[:, None, :]
    d_y = -np.sum(a * ra, axis=1) + np.sum(b * rb, axis=1)
    if single and np.ndim(y) == 0:
        return d_gammas[0], float(d_y[0])
    return d_gammas, d_y


def regularizer(c: Critic):
    """Quadratic pull towards the reference vector(s): ``(value, grads)``.

    For ``CriticSym`` the grads are ``(grad_gamma1, grad_gamma2)``; for ``CriticK``
    an array shaped like ``c.gammas``.
    """
    if isinstance(c, CriticSym):
        r1 = c.gamma1 - c.gamma_ref
        r2 = c.gamma2 - c.gamma_ref
        value = c.lam * (float(r1 @ r1) + float(r2 @ r2))
        return value, (2.0 * c.lam * r1, 2.0 * c.lam * r2)
    diff = c.gammas - np.repeat(c.gamma_ref, 2, axis=0)
    return c.lam * float(np.sum(diff ** 2)), 2.0 * c.lam * diff


def with_feature_map(c: Critic, phi: FeatureMap) -> Critic:
    if c.d != phi.d_out:
        raise DimensionError(f"critic dimension {c.d} does not match feature dimension {phi.d_out}")
    return replace(c, feature_map=phi)


def feasibility_violation(c: Critic, C: float, eta: float) -> bool:
    """True when ``2k C^2 max ||gamma_i||^2 > eta``; logged, never enforced."""
    lhs = 2 * c.k * C ** 2 * c.max_gamma_norm() ** 2
    if lhs > eta:
        logger.warning(f"critic outside feasibility ball: 2kC^2 max|gamma|^2 = {lhs:.4g} > eta = {eta:.4g}")
        return True
    return False


def c_transform_bound(c: Critic, xs: np.ndarray, ys: np.ndarray, C: float) -> float:
    """Right-hand side excess of the c-transform bound, averaged over a batch.

    ``k C^2 E[(1 + C|y|)^2] / (1 - eta) * sum_i ||gamma - gamma_ref||^2`` with
    ``eta = 2k C^2 max ||gamma_i||^2``, which must be below 1.
    """
    eta = 2 * c.k * C ** 2 * c.max_gamma_norm() ** 2
    if eta >= 1:
        raise ConfigError(f"bound requires 2kC^2 max|gamma|^2 < 1, got {eta:.4g}")
    reg_value, _ = regularizer(c)
    dist = reg_value / c.lam
    moment = float(np.mean((1.0 + C * np.abs(np.asarray(ys, dtype=float))) ** 2))
    return c.k * C ** 2 * moment / (1.0 - eta) * dist


def default_radius(c: Critic, x, y: float) -> float:
    X, _ = _features(c, x)
    return abs(float(y)) + 10.0 * (1.0 + c.max_gamma_norm() * float(np.linalg.norm(X[0])))


def c_transform_oracle(
    psi_at: Callable[[np.ndarray], np.ndarray],
    y: float,
    radius: float,
    grid_points: int = 2001,
    xatol: float = 1e-10,
    max_doublings: int = 5,
) -> float:
    """``sup_y' psi_at(y') - (y - y')^2 / 2`` by a dense grid search then bounded refinement.

    ``psi_at`` must accept an array of ``y'`` values. A maximizer on the grid
    boundary widens the bracket (doubling the radius) up to ``max_doublings`` times.
    """
    def objective(t):
        t = np.asarray(t, dtype=float)
        return np.asarray(psi_at(t), dtype=float) - 0.5 * (y - t) ** 2

    for attempt in range(max_doublings + 1):
        grid = np.linspace(y - radius, y + radius, grid_points)
        values = objective(grid)
        j = int(np.argmax(values))
        if 0 < j < grid_points - 1:
            break
        logger.warning(f"c-transform maximizer on bracket edge at radius {radius:.4g}, widening")
        radius *= 2.0
    else:
        raise BracketError(f"c-transform maximizer not bracketed after {max_doublings} doublings")

    res = minimize_scalar(
        lambda t: -float(objective(np.array([t]))[0]),
        bounds=(grid[j - 1], grid[j + 1]),
        method="bounded",
        options={"xatol": xatol},
    )
    return float(max(values[j], -res.fun))


def c_transform(c: Critic, x, y: float, radius: Optional[float] = None) -> float:
    """c-transform of a critic at one sample, via ``c_transform_oracle``."""
    x = np.asarray(x, dtype=float)
    evaluate = psi_sym if isinstance(c, CriticSym) else psi_k
    if radius is None:
        radius = default_radius(c, x, y)
    return c_transform_oracle(lambda t: evaluate(c, x, t), y, radius)
