"""EM and Gradient-EM baselines for the symmetric two-component model.

The posterior weight of the ``+beta`` component is ``w_i = expit(2 y_i beta'x_i / sigma2)``.
The M-step maximizes the simplified Q function in closed form: ``beta`` from a
Cholesky solve against the input second-moment matrix and ``sigma2`` as the
weighted mean of squared residuals.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from mlrbench.mlr_model import SIGMA2_FLOOR, Dataset, nll_symmetric, relative_error
from mlrbench.models import (
    ConfigError,
    SingularCovarianceError,
    SolverError,
    SolverResult,
    Trace,
    TraceRow,
)
from mlrbench.rng import stream
from mlrbench.solvers.base import BaseSolver

logger = logging.getLogger(__name__)

SigmaX = Union[str, np.ndarray, None]


@dataclass(frozen=True, eq=False)
class EMState:
    beta: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")


@dataclass(frozen=True)
class EMConfig:
    T: int = 100
    sigma2_init: float = 1.0
    init_scale: Optional[float] = None
    sigma2_floor: float = SIGMA2_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not self.sigma2_init > 0:
            raise ConfigError(f"sigma2_init must be positive, got {self.sigma2_init}")
        if not self.sigma2_floor > 0:
            raise ConfigError(f"sigma2_floor must be positive, got {self.sigma2_floor}")

    def to_dict(self) -> dict:
        return {
            "T": self.T, "sigma2_init": self.sigma2_init, "init_scale": self.init_scale,
            "sigma2_floor": self.sigma2_floor, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EMConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown EM settings: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True)
class GEMConfig:
    alpha: float = 1.0
    T: int = 100
    sigma2_init: float = 1.0
    init_scale: Optional[float] = None
    sigma2_floor: float = SIGMA2_FLOOR
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if not self.sigma2_init > 0:
            raise ConfigError(f"sigma2_init must be positive, got {self.sigma2_init}")
        if not self.sigma2_floor > 0:
            raise ConfigError(f"sigma2_floor must be positive, got {self.sigma2_floor}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "T": self.T, "sigma2_init": self.sigma2_init,
            "init_scale": self.init_scale, "sigma2_floor": self.sigma2_floor, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GEMConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown GEM settings: {sorted(unknown)}")
        return cls(**raw)


def initial_em_state(d: int, seed: int, sigma2: float = 1.0, init_scale: Optional[float] = None) -> EMState:
    """``beta ~ N(0, I/d)`` from the init stream; ``sigma2`` starts at 1."""
    scale = init_scale if init_scale is not None else 1.0 / math.sqrt(d)
    return EMState(beta=stream(seed, "init").normal(0.0, scale, d), sigma2=sigma2)


def _check_sigma2(sigma2: float) -> None:
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")


def e_weights(state: EMState, data: Dataset) -> np.ndarray:
    return expit(2.0 * data.ys * (data.xs @ state.beta) / state.sigma2)


def _weighted_sq_residuals(beta: np.ndarray, w: np.ndarray, data: Dataset) -> np.ndarray:
    u = data.xs @ beta
    return w * (data.ys - u) ** 2 + (1.0 - w) * (data.ys + u) ** 2


def q_function(new: EMState, old: EMState, data: Dataset, w: Optional[np.ndarray] = None) -> float:
    _check_sigma2(new.sigma2)
    if w is None:
        w = e_weights(old, data)
    s = float(np.mean(_weighted_sq_residuals(new.beta, w, data)))
    return -0.5 * math.log(new.sigma2) - s / (2.0 * new.sigma2)


def second_moment(data: Dataset) -> np.ndarray:
    return data.xs.T @ data.xs / data.n


def _factor(sigma_x: np.ndarray):
    try:
        factor = cho_factor(sigma_x)
    except LinAlgError as e:
        raise SingularCovarianceError(f"input covariance is not positive definite: {e}") from e
    if not np.all(np.isfinite(factor[0])):
        raise SingularCovarianceError("input covariance factorization is not finite")
    return factor


def resolve_sigma_x(data: Dataset, sigma_x: SigmaX = None) -> np.ndarray:
    if sigma_x is None or (isinstance(sigma_x, str) and sigma_x == "empirical"):
        if data.n < data.d:
            raise SingularCovarianceError(f"empirical covariance needs n >= d, got n={data.n}, d={data.d}")
        return second_moment(data)
    if isinstance(sigma_x, str):
        raise ConfigError(f"Unknown Sigma_x mode '{sigma_x}'")
    sigma_x = np.asarray(sigma_x, dtype=float)
    if sigma_x.shape != (data.d, data.d):
        raise ConfigError(f"Sigma_x must be {data.d}x{data.d}, got {sigma_x.shape}")
    return sigma_x


def m_step(
    old: EMState,
    data: Dataset,
    sigma_x: SigmaX = None,
    floor: float = SIGMA2_FLOOR,
    factor=None,
) -> EMState:
    """Closed-form maximizer of ``q_function(., old)``.

    ``sigma_x`` is ``"empirical"`` (default) or a known covariance matrix. A
    precomputed Cholesky ``factor`` skips the factorization.
    """
    if factor is None:
        factor = _factor(resolve_sigma_x(data, sigma_x))
    w = e_weights(old, data)
    rhs = data.xs.T @ ((2.0 * w - 1.0) * data.ys) / data.n
    beta = cho_solve(factor, rhs)
    sigma2 = float(np.mean(_weighted_sq_residuals(beta, w, data)))
    return EMState(beta=beta, sigma2=max(sigma2, floor))


def gem_grads(new: EMState, old: EMState, data: Dataset, w: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Gradient of ``q_function(new, old)`` in ``(beta, sigma2)``."""
    _check_sigma2(new.sigma2)
    if w is None:
        w = e_weights(old, data)
    u = data.xs @ new.beta
    y = data.ys
    coef = w * (y - u) + (w - 1.0) * (y + u)
    d_beta = data.xs.T @ coef / (new.sigma2 * data.n)
    s = float(np.mean(_weighted_sq_residuals(new.beta, w, data)))
    d_sigma2 = s / (2.0 * new.sigma2 ** 2) - 1.0 / (2.0 * new.sigma2)
    return d_beta, d_sigma2


def gem_update(state: EMState, d_beta: np.ndarray, d_sigma2: float, alpha: float, floor: float) -> EMState:
    """One projected ascent step; shared by the centralized and federated runners."""
    return EMState(beta=state.beta + alpha * d_beta, sigma2=max(state.sigma2 + alpha * d_sigma2, floor))


def _em_row(t: int, state: EMState, data: Dataset, beta_star: Optional[np.ndarray], started: float) -> TraceRow:
    w = e_weights(state, data)
    d_beta, _ = gem_grads(state, state, data, w)
    return TraceRow(
        iter=t,
        objective=q_function(state, state, data, w),
        grad_beta_norm=float(np.linalg.norm(d_beta)),
        rel_err=relative_error(state.beta, beta_star) if beta_star is not None else None,
        nll=nll_symmetric(data, state.beta, state.sigma2),
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )


def _check_finite(state: EMState, t: int) -> None:
    if not (np.all(np.isfinite(state.beta)) and math.isfinite(state.sigma2)):
        raise SolverError("non-finite EM iterate", iteration=t)


def run_em(
    data: Dataset,
    init: EMState,
    T: int,
    sigma_x: SigmaX = None,
    beta_star: Optional[np.ndarray] = None,
    floor: float = SIGMA2_FLOOR,
) -> Tuple[EMState, Trace]:
    """T rounds of E-step and closed-form M-step. Trace rows carry ``Q(state_t | state_t)``."""
    if T < 0:
        raise ConfigError(f"T must be >= 0, got {T}")
    factor = _factor(resolve_sigma_x(data, sigma_x))
    state = init
    trace = Trace()
    logger.info(f"EM: n={data.n}, d={data.d}, T={T}")
    for t in range(T):
        started = time.perf_counter()
        new_state = m_step(state, data, floor=floor, factor=factor)
        _check_finite(new_state, t)
        trace.append(_em_row(t, state, data, beta_star, started))
        state = new_state
    trace.append(_em_row(T, state, data, beta_star, time.perf_counter()))
    return state, trace


def run_gem(
    data: Dataset,
    init: EMState,
    cfg: GEMConfig,
    beta_star: Optional[np.ndarray] = None,
) -> Tuple[EMState, Trace]:
    """T single ascent steps on ``Q(., state_t)`` with the sigma2 floor projection."""
    state = init
    trace = Trace()
    logger.info(f"GEM: n={data.n}, d={data.d}, alpha={cfg.alpha}, T={cfg.T}")
    for t in range(cfg.T):
        started = time.perf_counter()
        d_beta, d_sigma2 = gem_grads(state, state, data)
        new_state = gem_update(state, d_beta, d_sigma2, cfg.alpha, cfg.sigma2_floor)
        _check_finite(new_state, t)
        trace.append(_em_row(t, state, data, beta_star, started))
        state = new_state
    trace.append(_em_row(cfg.T, state, data, beta_star, time.perf_counter()))
    return state, trace


class EMSolver(BaseSolver):
    name = "em"

    def __init__(self, config: EMConfig, sigma_x: SigmaX = None):
        super().__init__(config)
        self.sigma_x = sigma_x

    def run(self, data: Dataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        cfg = self.config
        init = initial_em_state(data.d, cfg.seed, cfg.sigma2_init, cfg.init_scale)
        state, trace = run_em(data, init, cfg.T, self.sigma_x, beta_star, cfg.sigma2_floor)
        return SolverResult(algorithm=self.name, beta=state.beta, sigma2=state.sigma2, trace=trace, state=state)


class GEMSolver(BaseSolver):
    name = "gem"

    def run(self, data: Dataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        cfg = self.config
        init = initial_em_state(data.d, cfg.seed, cfg.sigma2_init, cfg.init_scale)
        state, trace = run_gem(data, init, cfg, beta_star)
        return SolverResult(algorithm=self.name, beta=state.beta, sigma2=state.sigma2, trace=trace, state=state)
