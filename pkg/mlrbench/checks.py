"""Numerical self-checks behind ``mlrb check``.

Each check draws small random instances from the ``check`` stream and returns a
``CheckResult``; nothing here raises on a failed check. The finite-difference
helpers are shared with the test suite.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from mlrbench.critic import (
    CriticK,
    CriticSym,
    c_transform,
    c_transform_bound,
    psi_k,
    psi_k_grads,
    psi_sym,
    psi_sym_grads,
)
from mlrbench.fedsim import FederatedConfig, run_f_gem, run_f_wmlr
from mlrbench.mlr_model import (
    Dataset,
    FederatedDataset,
    GenConfig,
    MLRParams,
    draw_beta_star,
    generate_dataset,
    oracle_transport,
)
from mlrbench.rng import stream
from mlrbench.solvers.em import EMState, GEMConfig, gem_grads, m_step, q_function, run_gem
from mlrbench.solvers.wmlr import WMLRConfig, WMLRState, initial_state, objective, run_wmlr

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_RTOL = 1e-6
FD_ATOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def finite_difference(fn: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for j in range(x0.size):
        x = x0.copy().reshape(-1)
        x[j] = x0.reshape(-1)[j] + eps
        fplus = fn(x.reshape(x0.shape))
        x[j] = x0.reshape(-1)[j] - eps
        fminus = fn(x.reshape(x0.shape))
        flat[j] = (fplus - fminus) / (2 * eps)
    return grad


def gradient_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` with an absolute floor of ``FD_ATOL``."""
    a = np.asarray(analytic, dtype=float).ravel()
    b = np.asarray(numeric, dtype=float).ravel()
    diff = float(np.linalg.norm(a - b))
    if diff <= FD_ATOL:
        return 0.0
    return diff / max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), FD_ATOL)


def _worst(gaps: List[float], name: str, instances: int, tol: float = FD_RTOL) -> CheckResult:
    worst = max(gaps) if gaps else 0.0
    return CheckResult(name, worst <= tol, f"{instances} instances, worst relative gap {worst:.2e}")


def check_psi_sym_grads(instances: int = 100, d: int = 5, seed: int = 0) -> CheckResult:
    rng = stream(seed, "check", 0)
    gaps = []
    for _ in range(instances):
        g1, g2, gref, x = (rng.normal(0.0, 0.5, d) for _ in range(4))
        y = float(rng.normal(0.0, 2.0))
        c = CriticSym(g1, g2, gref)
        dg1, dg2, dy = psi_sym_grads(c, x, y)
        gaps.append(gradient_gap(dg1, finite_difference(lambda g: psi_sym(replace(c, gamma1=g), x, y), g1)))
        gaps.append(gradient_gap(dg2, finite_difference(lambda g: psi_sym(replace(c, gamma2=g), x, y), g2)))
        gaps.append(gradient_gap([dy], finite_difference(lambda t: psi_sym(c, x, float(t[0])), np.array([y]))))
    return _worst(gaps, "psi_sym gradients", instances)


def check_psi_k_grads(instances: int = 100, k: int = 3, d: int = 4, seed: int = 0) -> CheckResult:
    rng = stream(seed, "check", 1)
    gaps = []
    for _ in range(instances):
        gammas = rng.normal(0.0, 0.7, (2 * k, d))
        c = CriticK(gammas, rng.normal(0.0, 0.5, (k, d)), sigma2=float(rng.uniform(0.5, 2.0)))
        x = rng.normal(0.0, 1.0, d)
        y = float(rng.normal(0.0, 2.0))
        d_gammas, dy = psi_k_grads(c, x, y)
        gaps.append(gradient_gap(d_gammas, finite_difference(lambda g: psi_k(replace(c, gammas=g), x, y), gammas)))
        gaps.append(gradient_gap([dy], finite_difference(lambda t: psi_k(c, x, float(t[0])), np.array([y]))))
    return _worst(gaps, "psi_k gradients", instances)


def _small_dataset(seed: int, n: int = 60, d: int = 4, snr: float = 2.0, k: int = 2) -> Dataset:
    beta = draw_beta_star(d, snr, seed)
    if k == 2:
        params = MLRParams.symmetric(beta, 1.0)
    else:
        params = MLRParams(stream(seed, "truth", 1).normal(0.0, snr / math.sqrt(d), (k, d)), 1.0)
    return generate_dataset(GenConfig(n=n, d=d, snr=snr, seed=seed), params)


def objective_gaps(data: Dataset, state: WMLRState, cfg: WMLRConfig) -> List[float]:
    """Relative gaps between analytic and finite-difference gradients of the objective."""
    ev = objective(data, state, cfg)
    gaps = [gradient_gap(ev.grad_beta, finite_difference(
        lambda b: objective(data, replace(state, beta=b), cfg).value, state.beta))]
    c = state.critic
    if isinstance(c, CriticSym):
        gaps.append(gradient_gap(ev.grad_gammas[0], finite_difference(
            lambda g: objective(data, replace(state, critic=replace(c, gamma1=g)), cfg).value, c.gamma1)))
        gaps.append(gradient_gap(ev.grad_gammas[1], finite_difference(
            lambda g: objective(data, replace(state, critic=replace(c, gamma2=g)), cfg).value, c.gamma2)))
    else:
        gaps.append(gradient_gap(ev.grad_gammas, finite_difference(
            lambda g: objective(data, replace(state, critic=replace(c, gammas=g)), cfg).value, c.gammas)))
    return gaps


def check_objective_grads(instances: int = 100, seed: int = 0) -> CheckResult:
    gaps = []
    for i in range(instances):
        sym = i % 2 == 0
        k = 2 if sym else 3
        data = _small_dataset(seed + i, k=k)
        cfg = WMLRConfig(lam=0.5, k=k, symmetric=sym, seed=seed + i, init_scale=0.5)
        state = initial_state(data, cfg)
        gaps.extend(objective_gaps(data, state, cfg))
    return _worst(gaps, "objective gradients (fixed noise)", instances)


def check_q_grads(instances: int = 100, seed: int = 0) -> CheckResult:
    rng = stream(seed, "check", 2)
    gaps = []
    for i in range(instances):
        data = _small_dataset(seed + i, n=40)
        old = EMState(rng.normal(0.0, 1.0, data.d), float(rng.uniform(0.5, 2.0)))
        new = EMState(rng.normal(0.0, 1.0, data.d), float(rng.uniform(0.5, 2.0)))
        d_beta, d_sigma2 = gem_grads(new, old, data)
        fd_beta = finite_difference(lambda b: q_function(EMState(b, new.sigma2), old, data), new.beta)
        fd_sigma2 = finite_difference(lambda s: q_function(EMState(new.beta, float(s[0])), old, data),
                                      np.array([new.sigma2]))
        gaps.append(gradient_gap(d_beta, fd_beta))
        gaps.append(gradient_gap([d_sigma2], fd_sigma2))
    return _worst(gaps, "Q gradients", instances)


def check_m_step_optimality(instances: int = 10, directions: int = 20, seed: int = 0) -> CheckResult:
    rng = stream(seed, "check", 3)
    worst_grad = 0.0
    worst_rise = -math.inf
    for i in range(instances):
        data = _small_dataset(seed + i, n=200)
        old = EMState(rng.normal(0.0, 1.0, data.d), float(rng.uniform(0.5, 2.0)))
        new = m_step(old, data)
        d_beta, d_sigma2 = gem_grads(new, old, data)
        worst_grad = max(worst_grad, float(np.linalg.norm(d_beta)), abs(d_sigma2))
        q0 = q_function(new, old, data)
        for _ in range(directions):
            step = rng.normal(0.0, 1e-4, data.d + 1)
            moved = EMState(new.beta + step[:-1], max(new.sigma2 + step[-1], 1e-12))
            worst_rise = max(worst_rise, q_function(moved, old, data) - q0)
    ok = worst_grad <= 1e-9 and worst_rise <= 1e-9
    return CheckResult("M-step optimality", ok, f"max |grad| {worst_grad:.2e}, max Q rise {worst_rise:.2e}")


def _equal_shards(data: Dataset, M: int) -> FederatedDataset:
    size = data.n // M
    return FederatedDataset([data.subset(m * size, (m + 1) * size) for m in range(M)])


def check_federated_exactness(M: int = 4, per_agent_n: int = 25, rounds: int = 50, seed: int = 0) -> CheckResult:
    data = _small_dataset(seed, n=M * per_agent_n, d=3)
    beta_star = draw_beta_star(3, 2.0, seed)
    fed = _equal_shards(data, M)
    fcfg = FederatedConfig(M=M, per_agent_n=per_agent_n, rounds=rounds, seed=seed)

    cfg = WMLRConfig(lam=0.5, T=rounds, seed=seed)
    init = initial_state(data, cfg)
    central, trace = run_wmlr(data, cfg, init=init, beta_star=beta_star)
    fed_state, logs = run_f_wmlr(fed, cfg, fcfg, init=init, beta_star=beta_star)
    wmlr_gap = max(
        abs(trace.rows[r + 1].rel_err - logs[r].rel_err) / max(trace.rows[r + 1].rel_err, 1e-300)
        for r in range(rounds)
    )
    wmlr_gap = max(wmlr_gap, _rel(central.beta, fed_state.beta))

    gem_cfg = GEMConfig(alpha=0.5, T=rounds)
    start = EMState(stream(seed, "init").normal(0.0, 1.0 / math.sqrt(3), 3), 1.0)
    gem_state, _ = run_gem(data, start, gem_cfg)
    fgem_state, _ = run_f_gem(fed, start, gem_cfg, fcfg)
    gem_gap = max(_rel(gem_state.beta, fgem_state.beta), abs(gem_state.sigma2 - fgem_state.sigma2) / gem_state.sigma2)

    ok = wmlr_gap <= 1e-10 and gem_gap <= 1e-10
    return CheckResult("federated exactness", ok, f"F-WMLR gap {wmlr_gap:.2e}, F-GEM gap {gem_gap:.2e}")


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))


def check_transport_moments(n: int = 20_000, d: int = 3, seed: int = 0) -> CheckResult:
    """Transported samples must have the destination law's conditional mean and variance."""
    src = MLRParams.symmetric(draw_beta_star(d, 1.0, seed), 1.0)
    dst = MLRParams.symmetric(draw_beta_star(d, 3.0, seed + 1), 1.0)
    data = generate_dataset(GenConfig(n=n, d=d, snr=1.0, seed=seed), src)
    moved = oracle_transport(src, dst, data.xs, data.ys, data.zs)
    resid = moved - np.einsum("ij,ij->i", data.xs, dst.betas[data.zs - 1])
    mean_z = abs(float(np.mean(resid))) / (float(np.std(resid)) / math.sqrt(n))
    sq = resid ** 2 - dst.sigma2
    var_z = abs(float(np.mean(sq))) / (float(np.std(sq)) / math.sqrt(n))
    ok = mean_z <= 4.0 and var_z <= 4.0
    return CheckResult("transport oracle moments", ok, f"mean {mean_z:.2f} s.e., variance {var_z:.2f} s.e.")


def c_transform_excess(c: CriticSym, xs: np.ndarray, ys: np.ndarray, C: float) -> float:
    """``mean(psi^c) - mean(psi) - bound``; non-positive when the bound holds."""
    psi_c = np.array([c_transform(c, x, float(y)) for x, y in zip(xs, ys)])
    psi = psi_sym(c, xs, ys)
    return float(np.mean(psi_c) - np.mean(psi) - c_transform_bound(c, xs, ys, C))


def check_c_transform_bound(instances: int = 50, n: int = 40, d: int = 3, seed: int = 0) -> CheckResult:
    rng = stream(seed, "check", 4)
    C = 1.0
    worst = -math.inf
    for i in range(instances):
        params = MLRParams.symmetric(draw_beta_star(d, 1.0, seed + i), 1.0)
        data = generate_dataset(GenConfig(n=n, d=d, snr=1.0, x_bound=C, seed=seed + i), params)
        g1, g2, gref = (v / max(1.0, np.linalg.norm(v) / 0.3) for v in rng.normal(0.0, 0.3, (3, d)))
        worst = max(worst, c_transform_excess(CriticSym(g1, g2, gref), data.xs, data.ys, C))
    return CheckResult("c-transform bound", worst <= 1e-9, f"{instances} instances, worst excess {worst:.2e}")


CHECKS: List[Callable[..., CheckResult]] = [
    check_psi_sym_grads,
    check_psi_k_grads,
    check_objective_grads,
    check_q_grads,
    check_m_step_optimality,
    check_federated_exactness,
    check_transport_moments,
    check_c_transform_bound,
]


def run_checks(seed: int = 0, only: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for check in CHECKS:
        name = check.__name__.replace("check_", "")
        if only and name not in only:
            continue
        try:
            result = check(seed=seed)
        except Exception as e:
            logger.exception(f"check {name} raised")
            result = CheckResult(name, False, f"raised {type(e).__name__}: {e}")
        logger.info(f"{result.name}: {'ok' if result.passed else 'FAILED'} ({result.detail})")
        results.append(result)
    return results
