"""Wasserstein minimax solver (WMLR): empirical objective, gradients and GDA.

The model distribution ``p_beta`` is realized with common random numbers: one
standard-normal draw per sample (plus a latent label per sample for general k)
is cached in the state and scaled by ``sqrt(sigma2)`` at use. In ``resample``
mode the draw is refreshed from ``(seed, agent, iteration)`` after every step.

For the symmetric model the model samples use the ``+beta`` component only;
``psi_sym`` is even in ``y`` so this leaves the objective unchanged and makes
the beta-gradient exact.
"""
import itertools
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional, Tuple, Union

import numpy as np

from mlrbench.critic import (
    CriticK,
    CriticSym,
    FeatureMap,
    _psi_k_terms,
    logcosh,
    regularizer,
)
from mlrbench.mlr_model import Dataset, estimate_sigma2, nll_symmetric, relative_error
from mlrbench.models import ConfigError, SolverError, SolverResult, Trace, TraceRow
from mlrbench.rng import stream
from mlrbench.solvers.base import BaseSolver

logger = logging.getLogger(__name__)

POWER_ITERS = 200
POWER_TOL = 1e-10


@dataclass(frozen=True)
class WMLRConfig:
    lam: float = 0.5
    alpha_max: Optional[float] = None
    alpha_min: Optional[float] = None
    T: int = 100
    sigma_mode: Literal["known", "estimated"] = "known"
    sigma2: float = 1.0
    noise_mode: Literal["fixed", "resample"] = "fixed"
    init_scale: Optional[float] = None
    k: int = 2
    symmetric: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        # alpha_max = 1 / (2 lambda), alpha_min = alpha_max / 10 unless given
        if self.alpha_max is None:
            object.__setattr__(self, "alpha_max", 1.0 / (2.0 * self.lam))
        if self.alpha_min is None:
            object.__setattr__(self, "alpha_min", self.alpha_max / 10.0)
        if self.alpha_max < 0 or self.alpha_min < 0:
            raise ConfigError(f"step sizes must be non-negative, got {self.alpha_min}, {self.alpha_max}")
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if self.sigma_mode not in ("known", "estimated"):
            raise ConfigError(f"Unknown sigma_mode '{self.sigma_mode}'")
        if self.noise_mode not in ("fixed", "resample"):
            raise ConfigError(f"Unknown noise_mode '{self.noise_mode}'")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.symmetric and self.k != 2:
            raise ConfigError("the symmetric solver requires k = 2")
        if self.init_scale is not None and self.init_scale < 0:
            raise ConfigError(f"init_scale must be non-negative, got {self.init_scale}")

    def to_dict(self) -> dict:
        return {
            "lam": self.lam, "alpha_max": self.alpha_max, "alpha_min": self.alpha_min,
            "T": self.T, "sigma_mode": self.sigma_mode, "sigma2": self.sigma2,
            "noise_mode": self.noise_mode, "init_scale": self.init_scale,
            "k": self.k, "symmetric": self.symmetric, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "WMLRConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"Unknown WMLR settings: {sorted(unknown)}")
        return cls(**raw)


@dataclass(frozen=True, eq=False)
class WMLRState:
    beta: np.ndarray
    critic: Union[CriticSym, CriticK]
    model_noise: np.ndarray
    model_latent: Optional[np.ndarray] = None
    iter: int = 0
    agent: int = 0

    @property
    def symmetric(self) -> bool:
        return isinstance(self.critic, CriticSym)


@dataclass
class ObjectiveEval:
    value: float
    grad_beta: np.ndarray
    grad_gammas: np.ndarray
    data_term: float
    model_term: float
    reg_term: float

    def is_finite(self) -> bool:
        return (
            math.isfinite(self.value)
            and bool(np.all(np.isfinite(self.grad_beta)))
            and bool(np.all(np.isfinite(self.grad_gammas)))
        )


@dataclass(frozen=True)
class TheoryStepSizes:
    C: float
    eta: float
    L_smooth: float
    kappa: float
    alpha_max: float
    alpha_min: float
    valid: bool


def draw_model_noise(seed: int, n: int, agent: int = 0, iteration: int = 0) -> np.ndarray:
    return stream(seed, "solver-noise", agent, iteration).standard_normal(n)


def draw_model_latent(seed: int, n: int, k: int, agent: int = 0, iteration: int = 0) -> np.ndarray:
    return stream(seed, "solver-latent", agent, iteration).integers(1, k + 1, size=n)


def map_features(data: Dataset, feature_map: Optional[FeatureMap]) -> Dataset:
    if feature_map is None:
        return data
    return Dataset(xs=feature_map.apply(data.xs), ys=data.ys, zs=data.zs)


def power_iterate(
    matvec: Callable[[np.ndarray], np.ndarray],
    d: int,
    iters: int = POWER_ITERS,
    tol: float = POWER_TOL,
    seed: int = 0,
) -> Tuple[np.ndarray, int]:
    """Top eigenvector of a PSD operator given only its products; returns ``(v, steps)``.

    Starts from a random unit vector drawn from the ``power`` stream of ``seed``.
    The sign is fixed so that the first nonzero coordinate is positive.
    """
    v = stream(seed, "power").standard_normal(d)
    v = v / np.linalg.norm(v)
    steps = 0
    for steps in range(1, iters + 1):
        w = matvec(v)
        norm = np.linalg.norm(w)
        if norm == 0 or not math.isfinite(norm):
            raise SolverError("power iteration hit a zero or non-finite product", iteration=steps)
        w = w / norm
        nonzero = np.flatnonzero(w)
        if nonzero.size and w[nonzero[0]] < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, steps


def second_moment_matvec(data: Dataset) -> Callable[[np.ndarray], np.ndarray]:
    """``v -> (1/n) sum_i y_i^2 x_i x_i' v`` in O(n d)."""
    y2 = data.ys ** 2

    def matvec(v: np.ndarray) -> np.ndarray:
        return data.xs.T @ (y2 * (data.xs @ v)) / data.n

    return matvec


def reference_vector(
    data: Dataset,
    iters: int = POWER_ITERS,
    tol: float = POWER_TOL,
    seed: int = 0,
) -> np.ndarray:
    """Top eigenvector of ``(1/n) sum y^2 x x'`` by matrix-free power iteration."""
    if data.n < 1:
        raise ConfigError("reference vector needs at least one sample")
    if not np.any(data.ys):
        raise SolverError("moment matrix is zero (all y = 0); no reference direction")
    v, steps = power_iterate(second_moment_matvec(data), data.d, iters, tol, seed)
    logger.debug(f"reference vector converged in {steps} power steps")
    return v


def theory_stepsizes(data: Dataset, lam: float, gamma_ref: np.ndarray) -> TheoryStepSizes:
    """Step sizes from the smoothness and strong-concavity constants of the regularized objective."""
    C = float(np.max(np.linalg.norm(data.xs, axis=1)))
    eta = C ** 2 * float(np.mean(data.ys ** 2))
    L = lam + 4.0 * eta * (1.0 + eta / lam + float(np.linalg.norm(gamma_ref)))
    margin = lam - 2.0 * eta
    valid = margin > 0
    if valid:
        kappa = L / margin
        alpha_min = 1.0 / (kappa ** 2 * L)
    else:
        kappa = math.inf
        alpha_min = 0.0
        logger.warning(f"theory step sizes invalid: lambda={lam:.4g} <= 2 eta={2 * eta:.4g}")
    return TheoryStepSizes(C=C, eta=eta, L_smooth=L, kappa=kappa, alpha_max=1.0 / L, alpha_min=alpha_min, valid=valid)


def initial_state(
    data: Dataset,
    cfg: WMLRConfig,
    gamma_ref: Optional[np.ndarray] = None,
) -> WMLRState:
    """Draws beta and the critic from N(0, init_scale^2 I) and caches the model noise."""
    d = data.d
    scale = cfg.init_scale if cfg.init_scale is not None else 1.0 / math.sqrt(d)
    rng = stream(cfg.seed, "init")
    if gamma_ref is None:
        gamma_ref = reference_vector(data, seed=cfg.seed)
    noise = draw_model_noise(cfg.seed, data.n)

    if cfg.symmetric:
        beta = rng.normal(0.0, scale, d)
        gamma1 = rng.normal(0.0, scale, d)
        gamma2 = rng.normal(0.0, scale, d)
        critic = CriticSym(gamma1=gamma1, gamma2=gamma2, gamma_ref=gamma_ref, lam=cfg.lam)
        return WMLRState(beta=beta, critic=critic, model_noise=noise)

    beta = rng.normal(0.0, scale, (cfg.k, d))
    gammas = rng.normal(0.0, scale, (2 * cfg.k, d))
    refs = np.atleast_2d(gamma_ref)
    if refs.shape[0] == 1:
        refs = np.repeat(refs, cfg.k, axis=0)
    critic = CriticK(gammas=gammas, gamma_ref=refs, lam=cfg.lam, sigma2=cfg.sigma2)
    latent = draw_model_latent(cfg.seed, data.n, cfg.k)
    return WMLRState(beta=beta, critic=critic, model_noise=noise, model_latent=latent)


def resolve_sigma2(cfg: WMLRConfig, data: Dataset, state: WMLRState) -> float:
    if cfg.sigma_mode == "known":
        return cfg.sigma2
    return estimate_sigma2(data, state.beta)


def model_samples(state: WMLRState, data: Dataset, sigma2: float) -> np.ndarray:
    if state.model_noise.shape[0] != data.n:
        raise ConfigError(f"model noise has {state.model_noise.shape[0]} draws for {data.n} samples")
    eps = math.sqrt(sigma2) * state.model_noise
    if state.symmetric:
        return data.xs @ state.beta + eps
    if state.model_latent is None:
        raise ConfigError("general-k state needs cached latent draws")
    return np.einsum("ij,ij->i", data.xs, state.beta[state.model_latent - 1]) + eps


def objective_sym(data: Dataset, state: WMLRState, cfg: WMLRConfig, sigma2: Optional[float] = None) -> ObjectiveEval:
    c = state.critic
    if not isinstance(c, CriticSym):
        raise ConfigError("objective_sym needs a symmetric critic")
    if sigma2 is None:
        sigma2 = resolve_sigma2(cfg, data, state)
    X, y, n = data.xs, data.ys, data.n
    yp = model_samples(state, data, sigma2)

    u1 = X @ c.gamma1
    u2 = X @ c.gamma2
    t1, t2 = y * u1, y * u2
    s1, s2 = yp * u1, yp * u2
    data_term = float(np.mean(logcosh(t1) - logcosh(t2)))
    model_term = float(np.mean(logcosh(s1) - logcosh(s2)))
    reg_term, (r1, r2) = regularizer(c)

    th_t1, th_t2 = np.tanh(t1), np.tanh(t2)
    th_s1, th_s2 = np.tanh(s1), np.tanh(s2)
    grad_g1 = X.T @ (th_t1 * y - th_s1 * yp) / n - r1
    grad_g2 = -(X.T @ (th_t2 * y - th_s2 * yp)) / n - r2
    grad_beta = -(X.T @ (th_s1 * u1 - th_s2 * u2)) / n

    return ObjectiveEval(
        value=data_term - model_term - reg_term,
        grad_beta=grad_beta,
        grad_gammas=np.stack([grad_g1, grad_g2]),
        data_term=data_term,
        model_term=model_term,
        reg_term=reg_term,
    )


def objective_k(data: Dataset, state: WMLRState, cfg: WMLRConfig, sigma2: Optional[float] = None) -> ObjectiveEval:
    c = state.critic
    if not isinstance(c, CriticK):
        raise ConfigError("objective_k needs a general-k critic")
    if sigma2 is None:
        sigma2 = resolve_sigma2(cfg, data, state)
    X, y, n = data.xs, data.ys, data.n
    yp = model_samples(state, data, sigma2)

    v_data, a, ra, b, rb = _psi_k_terms(c, X, y)
    v_model, am, ram, bm, rbm = _psi_k_terms(c, X, yp)
    data_term = float(np.mean(v_data))
    model_term = float(np.mean(v_model))
    reg_term, reg_grads = regularizer(c)

    grad_gammas = np.empty_like(c.gammas)
    grad_gammas[0::2] = ((a * ra) - (am * ram)).T @ X / n
    grad_gammas[1::2] = -(((b * rb) - (bm * rbm)).T @ X) / n
    grad_gammas -= reg_grads

    d_y = -np.sum(am * ram, axis=1) + np.sum(bm * rbm, axis=1)
    onehot = np.zeros((n, c.k))
    onehot[np.arange(n), state.model_latent - 1] = 1.0
    grad_beta = -((onehot * d_y[:, None]).T @ X) / n

    return ObjectiveEval(
        value=data_term - model_term - reg_term,
        grad_beta=grad_beta,
        grad_gammas=grad_gammas,
        data_term=data_term,
        model_term=model_term,
        reg_term=reg_term,
    )


def objective(data: Dataset, state: WMLRState, cfg: WMLRConfig, sigma2: Optional[float] = None) -> ObjectiveEval:
    if state.symmetric:
        return objective_sym(data, state, cfg, sigma2)
    return objective_k(data, state, cfg, sigma2)


def apply_step(state: WMLRState, ev: ObjectiveEval, alpha_min: float, alpha_max: float) -> WMLRState:
    """One simultaneous descent (beta) / ascent (gammas) update from gradients at ``state``."""
    beta = state.beta - alpha_min * ev.grad_beta
    c = state.critic
    if isinstance(c, CriticSym):
        critic = replace(
            c,
            gamma1=c.gamma1 + alpha_max * ev.grad_gammas[0],
            gamma2=c.gamma2 + alpha_max * ev.grad_gammas[1],
        )
    else:
        critic = replace(c, gammas=c.gammas + alpha_max * ev.grad_gammas)
    return replace(state, beta=beta, critic=critic)


def refresh_noise(state: WMLRState, cfg: WMLRConfig) -> WMLRState:
    if cfg.noise_mode == "fixed":
        return state
    n = state.model_noise.shape[0]
    noise = draw_model_noise(cfg.seed, n, agent=state.agent, iteration=state.iter)
    latent = state.model_latent
    if latent is not None:
        latent = draw_model_latent(cfg.seed, n, state.critic.k, agent=state.agent, iteration=state.iter)
    return replace(state, model_noise=noise, model_latent=latent)


def gda_update(
    state: WMLRState,
    data: Dataset,
    cfg: WMLRConfig,
    sigma2: Optional[float] = None,
) -> Tuple[WMLRState, ObjectiveEval]:
    ev = objective(data, state, cfg, sigma2)
    if not ev.is_finite():
        raise SolverError("non-finite objective or gradient", iteration=state.iter)
    new_state = apply_step(state, ev, cfg.alpha_min, cfg.alpha_max)
    new_state = refresh_noise(replace(new_state, iter=state.iter + 1), cfg)
    return new_state, ev


def gda_step(state: WMLRState, data: Dataset, cfg: WMLRConfig, sigma2: Optional[float] = None) -> WMLRState:
    """Simultaneous GDA step; every gradient is taken at the pre-step state."""
    new_state, _ = gda_update(state, data, cfg, sigma2)
    return new_state


def inner_maximize(
    data: Dataset,
    state: WMLRState,
    cfg: WMLRConfig,
    iters: int = 2000,
    tol: float = 1e-8,
    sigma2: Optional[float] = None,
) -> Tuple[WMLRState, ObjectiveEval]:
    """Critic ascent with beta frozen until the gamma-gradient norm falls below ``tol``."""
    ev = objective(data, state, cfg, sigma2)
    for _ in range(iters):
        if float(np.linalg.norm(ev.grad_gammas)) < tol:
            break
        state = apply_step(state, ev, 0.0, cfg.alpha_max)
        ev = objective(data, state, cfg, sigma2)
        if not ev.is_finite():
            raise SolverError("critic ascent diverged", iteration=state.iter)
    else:
        logger.warning(f"critic ascent stopped at {iters} steps, |grad| = {np.linalg.norm(ev.grad_gammas):.3g}")
    return state, ev


def beta_error(beta: np.ndarray, beta_star: np.ndarray) -> float:
    """Sign-aware relative error (symmetric) or the best label permutation (general k)."""
    beta = np.asarray(beta, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta.ndim == 1:
        return relative_error(beta, beta_star.ravel() if beta_star.ndim == 1 else beta_star[0])
    scale = np.linalg.norm(beta_star)
    if scale == 0:
        raise ConfigError("relative error is undefined for beta* = 0")
    best = min(
        np.linalg.norm(beta[list(perm)] - beta_star)
        for perm in itertools.permutations(range(beta.shape[0]))
    )
    return float(best / scale)


def _trace_row(
    t: int,
    ev: ObjectiveEval,
    state: WMLRState,
    data: Dataset,
    beta_star: Optional[np.ndarray],
    started: float,
) -> TraceRow:
    rel_err = beta_error(state.beta, beta_star) if beta_star is not None else None
    nll = None
    if state.symmetric:
        nll = nll_symmetric(data, state.beta, estimate_sigma2(data, state.beta))
    return TraceRow(
        iter=t,
        objective=ev.value,
        grad_beta_norm=float(np.linalg.norm(ev.grad_beta)),
        data_term=ev.data_term,
        model_term=ev.model_term,
        reg_term=ev.reg_term,
        rel_err=rel_err,
        nll=nll,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )


def run_wmlr(
    data: Dataset,
    cfg: WMLRConfig,
    init: Optional[WMLRState] = None,
    beta_star: Optional[np.ndarray] = None,
    feature_map: Optional[FeatureMap] = None,
) -> Tuple[WMLRState, Trace]:
    """Runs T simultaneous GDA steps; the trace holds one row per iterate 0..T.

    With a ``feature_map`` the whole run (model samples and critic) works on
    ``phi(x)`` in place of ``x``.
    """
    if data.n < 1:
        raise ConfigError("WMLR needs at least one sample")
    data = map_features(data, feature_map)
    state = init if init is not None else initial_state(data, cfg)
    trace = Trace()
    logger.info(f"WMLR: n={data.n}, d={data.d}, lambda={cfg.lam}, T={cfg.T}")

    for t in range(cfg.T):
        started = time.perf_counter()
        sigma2 = resolve_sigma2(cfg, data, state)
        new_state, ev = gda_update(state, data, cfg, sigma2)
        row = _trace_row(t, ev, state, data, beta_star, started)
        trace.append(row)
        logger.debug(f"iter {t}: L={row.objective:.6g} |grad_beta|={row.grad_beta_norm:.3g} rel_err={row.rel_err}")
        state = new_state

    started = time.perf_counter()
    ev = objective(data, state, cfg, resolve_sigma2(cfg, data, state))
    trace.append(_trace_row(cfg.T, ev, state, data, beta_star, started))
    return state, trace


class WMLRSolver(BaseSolver):
    name = "wmlr"

    def __init__(self, config: WMLRConfig, feature_map: Optional[FeatureMap] = None):
        super().__init__(config)
        self.feature_map = feature_map

    def run(self, data: Dataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        state, trace = run_wmlr(data, self.config, beta_star=beta_star, feature_map=self.feature_map)
        mapped = map_features(data, self.feature_map)
        return SolverResult(
            algorithm=self.name,
            beta=state.beta,
            sigma2=estimate_sigma2(mapped, state.beta),
            trace=trace,
            state=state,
        )
