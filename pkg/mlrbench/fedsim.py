"""In-process federated simulator: F-WMLR, F-EM and F-GEM over agent shards.

Every round the server broadcasts its parameters to the participating agents,
each agent takes local steps on its own shard and uploads updated parameters,
and the server averages them. The reduction always runs in agent-id order so
the result does not depend on how agents were scheduled.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, TypeVar

import numpy as np

from mlrbench.critic import CriticK, CriticSym
from mlrbench.mlr_model import FederatedDataset, estimate_sigma2, nll_symmetric, relative_error
from mlrbench.models import ConfigError, RoundLog, SolverError, SolverResult
from mlrbench.rng import stream
from mlrbench.solvers.base import BaseSolver
from mlrbench.solvers.em import (
    EMState,
    GEMConfig,
    e_weights,
    gem_grads,
    gem_update,
    initial_em_state,
)
from mlrbench.solvers.wmlr import (
    POWER_TOL,
    WMLRConfig,
    WMLRState,
    beta_error,
    draw_model_latent,
    draw_model_noise,
    gda_update,
    power_iterate,
    resolve_sigma2,
    second_moment_matvec,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

DNC_THRESHOLD = 0.5
CONVERGENCE_FACTOR = 1.05


@dataclass(frozen=True)
class FederatedConfig:
    M: int = 10
    per_agent_n: int = 10
    data_mode: Literal["per-agent", "per-sample"] = "per-agent"
    participation: float = 1.0
    local_steps: int = 1
    fem_inner_max: int = 50
    fem_tol: float = 0.01
    fem_alpha: float = 0.08
    rounds: int = 200
    power_iters: int = 20
    weighting: Literal["uniform", "samples"] = "uniform"
    workers: int = 1
    dnc_threshold: float = DNC_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.per_agent_n < 1:
            raise ConfigError(f"per_agent_n must be >= 1, got {self.per_agent_n}")
        if self.data_mode not in ("per-agent", "per-sample"):
            raise ConfigError(f"Unknown data_mode '{self.data_mode}'")
        if not 0 < self.participation <= 1:
            raise ConfigError(f"participation must be in (0, 1], got {self.participation}")
        if self.local_steps < 1:
            raise ConfigError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.fem_inner_max < 1:
            raise ConfigError(f"fem_inner_max must be >= 1, got {self.fem_inner_max}")
        if not self.fem_tol >= 0:
            raise ConfigError(f"fem_tol must be non-negative, got {self.fem_tol}")
        if not self.fem_alpha > 0:
            raise ConfigError(f"fem_alpha must be positive, got {self.fem_alpha}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.power_iters < 1:
            raise ConfigError(f"power_iters must be >= 1, got {self.power_iters}")
        if self.weighting not in ("uniform", "samples"):
            raise ConfigError(f"Unknown weighting '{self.weighting}'")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: dict) -> "FederatedConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown federated settings: {sorted(unknown)}")
        return cls(**raw)


def _check_shards(fed: FederatedDataset) -> None:
    if fed.M < 1:
        raise SolverError("federated dataset has no agents")
    empty = [m for m, size in enumerate(fed.sizes) if size == 0]
    if empty:
        raise SolverError(f"empty shard(s) for agent(s) {empty}")


def participants(fcfg: FederatedConfig, M: int, round_index: int) -> List[int]:
    """Agent ids taking part in a round, sorted; full participation draws nothing."""
    if fcfg.participation >= 1.0:
        return list(range(M))
    count = max(1, int(round(fcfg.participation * M)))
    chosen = stream(fcfg.seed, "participation", round_index).choice(M, size=count, replace=False)
    return sorted(int(m) for m in chosen)


def _run_agents(fn: Callable[[int], T], agents: Sequence[int], workers: int) -> Dict[int, T]:
    if workers <= 1 or len(agents) <= 1:
        return {m: fn(m) for m in agents}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, agents))
    return dict(zip(agents, results))


def _agent_weights(fcfg: FederatedConfig, fed: FederatedDataset, agents: Sequence[int]) -> Optional[np.ndarray]:
    if fcfg.weighting == "uniform":
        return None
    sizes = np.array([fed.sizes[m] for m in agents], dtype=float)
    return sizes / sizes.sum()


def server_average(uploads: Dict[int, np.ndarray], weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Average of uploaded arrays, reduced in ascending agent-id order."""
    agents = sorted(uploads)
    stacked = np.stack([np.asarray(uploads[m], dtype=float) for m in agents])
    if weights is None:
        return stacked.sum(axis=0) / len(agents)
    return np.tensordot(np.asarray(weights, dtype=float), stacked, axes=1)


def _pooled_nll(fed: FederatedDataset, beta: np.ndarray, sigma2: Optional[float] = None) -> float:
    pooled = fed.pooled()
    if sigma2 is None:
        sigma2 = estimate_sigma2(pooled, beta)
    return nll_symmetric(pooled, beta, sigma2)


def convergence_round(errors: Sequence[float]) -> Optional[int]:
    """Earliest index after which the error stays within 5% of its final value."""
    errors = list(errors)
    if not errors:
        raise ValueError("convergence_round needs a nonempty sequence")
    final = errors[-1]
    if not math.isfinite(final):
        return None
    t0 = len(errors) - 1
    while t0 > 0 and errors[t0 - 1] <= CONVERGENCE_FACTOR * final:
        t0 -= 1
    return t0


def did_not_converge(errors: Sequence[float], threshold: float = DNC_THRESHOLD) -> bool:
    if not errors:
        return True
    final = errors[-1]
    return not math.isfinite(final) or final > threshold


def training_errors(logs: Sequence[RoundLog]) -> List[float]:
    return [r.rel_err for r in logs if r.phase != "reference" and r.rel_err is not None]


# --- F-WMLR ---

def _param_length(critic) -> int:
    if isinstance(critic, CriticSym):
        return 3 * critic.d
    return critic.gammas.size + critic.k * critic.d


def federated_reference_vector(
    fed: FederatedDataset,
    fcfg: FederatedConfig,
    logs: List[RoundLog],
    seed: int = 0,
) -> np.ndarray:
    """Power iteration on the averaged moment matrix, one communication round per step.

    Starts from the same seeded unit vector as the centralized ``reference_vector``
    and stops after ``power_iters`` rounds or once the iterate moves less than
    ``POWER_TOL``.
    """
    d = fed.shards[0].d
    matvecs = [second_moment_matvec(shard) for shard in fed.shards]
    weights = _agent_weights(fcfg, fed, range(fed.M))
    if not any(np.any(shard.ys) for shard in fed.shards):
        raise SolverError("moment matrix is zero (all y = 0); no reference direction")

    def averaged(v: np.ndarray) -> np.ndarray:
        started = time.perf_counter()
        uploads = _run_agents(lambda m: matvecs[m](v), range(fed.M), fcfg.workers)
        out = server_average(uploads, weights)
        logs.append(RoundLog(
            round=len(logs) + 1,
            broadcasts=fed.M,
            uploads=fed.M,
            scalars_sent=2 * fed.M * d,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            phase="reference",
        ))
        return out

    v, steps = power_iterate(averaged, d, iters=fcfg.power_iters, tol=POWER_TOL, seed=seed)
    logger.info(f"federated reference vector: {steps} power rounds over {fed.M} agents")
    return v


def initial_federated_state(
    fed: FederatedDataset,
    cfg: WMLRConfig,
    fcfg: FederatedConfig,
    logs: List[RoundLog],
) -> Tuple[WMLRState, List[np.ndarray], List[Optional[np.ndarray]]]:
    """Server parameters plus per-agent slices of one pooled model-noise draw.

    The pooled draw is the one ``initial_state`` makes for the concatenated
    shards, cut at the shard offsets in agent-id order.
    """
    d = fed.shards[0].d
    gamma_ref = federated_reference_vector(fed, fcfg, logs, seed=cfg.seed)
    scale = cfg.init_scale if cfg.init_scale is not None else 1.0 / math.sqrt(d)
    rng = stream(cfg.seed, "init")
    total = sum(fed.sizes)
    noises = _split(draw_model_noise(cfg.seed, total), fed.sizes)
    if cfg.symmetric:
        beta = rng.normal(0.0, scale, d)
        critic = CriticSym(
            gamma1=rng.normal(0.0, scale, d),
            gamma2=rng.normal(0.0, scale, d),
            gamma_ref=gamma_ref,
            lam=cfg.lam,
        )
        latents: List[Optional[np.ndarray]] = [None] * fed.M
    else:
        beta = rng.normal(0.0, scale, (cfg.k, d))
        critic = CriticK(
            gammas=rng.normal(0.0, scale, (2 * cfg.k, d)),
            gamma_ref=np.repeat(gamma_ref[None, :], cfg.k, axis=0),
            lam=cfg.lam,
            sigma2=cfg.sigma2,
        )
        latents = _split(draw_model_latent(cfg.seed, total, cfg.k), fed.sizes)
    state = WMLRState(beta=beta, critic=critic, model_noise=np.concatenate(noises))
    return state, noises, latents


def _split(values: Optional[np.ndarray], sizes: Sequence[int]) -> List[Optional[np.ndarray]]:
    if values is None:
        return [None] * len(sizes)
    if values.shape[0] != sum(sizes):
        raise ConfigError(f"init noise has {values.shape[0]} draws for {sum(sizes)} pooled samples")
    return np.split(values, np.cumsum(sizes)[:-1])


def _critic_params(critic) -> np.ndarray:
    if isinstance(critic, CriticSym):
        return np.stack([critic.gamma1, critic.gamma2])
    return critic.gammas


def _with_critic_params(critic, params: np.ndarray):
    if isinstance(critic, CriticSym):
        return replace(critic, gamma1=params[0], gamma2=params[1])
    return replace(critic, gammas=params)


def run_f_wmlr(
    fed: FederatedDataset,
    cfg: WMLRConfig,
    fcfg: FederatedConfig,
    init: Optional[WMLRState] = None,
    beta_star: Optional[np.ndarray] = None,
) -> Tuple[WMLRState, List[RoundLog]]:
    """Federated GDA: local GDA step(s) per agent, parameter averaging at the server.

    ``init`` supplies the starting parameters, the reference vector and the pooled
    model-noise realization (split across shards in order); without it the
    reference vector comes from a federated power iteration whose rounds are logged.

    With ``sigma_mode="estimated"`` each agent plugs in the residual variance of
    its own shard, so the result can differ from a centralized run that uses the
    pooled estimate. Known-sigma runs are unaffected.
    """
    _check_shards(fed)
    logs: List[RoundLog] = []
    if init is None:
        server, noises, latents = initial_federated_state(fed, cfg, fcfg, logs)
    else:
        server = init
        noises = _split(init.model_noise, fed.sizes)
        latents = _split(init.model_latent, fed.sizes)

    agent_states: Dict[int, WMLRState] = {
        m: WMLRState(beta=server.beta, critic=server.critic, model_noise=noises[m], model_latent=latents[m], agent=m)
        for m in range(fed.M)
    }
    plen = _param_length(server.critic)
    logger.info(f"F-WMLR: M={fed.M}, rounds={fcfg.rounds}, lambda={cfg.lam}, local_steps={fcfg.local_steps}")

    for r in range(fcfg.rounds):
        started = time.perf_counter()
        agents = participants(fcfg, fed.M, r)

        def local(m: int) -> Tuple[WMLRState, np.ndarray]:
            st = replace(agent_states[m], beta=server.beta, critic=server.critic, iter=server.iter)
            shard = fed.shards[m]
            grad = None
            for _ in range(fcfg.local_steps):
                st, ev = gda_update(st, shard, cfg, resolve_sigma2(cfg, shard, st))
                if grad is None:
                    grad = ev.grad_beta
            return st, grad

        results = _run_agents(local, agents, fcfg.workers)
        weights = _agent_weights(fcfg, fed, agents)
        beta = server_average({m: results[m][0].beta for m in agents}, weights)
        critic_params = server_average({m: _critic_params(results[m][0].critic) for m in agents}, weights)
        grad_norm = float(np.linalg.norm(server_average({m: results[m][1] for m in agents}, weights)))
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(critic_params))):
            raise SolverError("non-finite averaged parameters", iteration=r)

        for m in agents:
            agent_states[m] = results[m][0]
        server = replace(
            server,
            beta=beta,
            critic=_with_critic_params(server.critic, critic_params),
            iter=server.iter + fcfg.local_steps,
        )

        rel_err = beta_error(beta, beta_star) if beta_star is not None else None
        nll = _pooled_nll(fed, beta) if cfg.symmetric else None
        logs.append(RoundLog(
            round=len(logs) + 1,
            broadcasts=len(agents),
            uploads=len(agents),
            scalars_sent=2 * len(agents) * plen,
            rel_err=rel_err,
            nll=nll,
            grad_norm=grad_norm,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        ))
        logger.debug(f"round {r + 1}: rel_err={rel_err} |grad_beta|={grad_norm:.3g}")

    server = replace(
        server,
        model_noise=np.concatenate([agent_states[m].model_noise for m in range(fed.M)]),
        model_latent=_concat_latents([agent_states[m].model_latent for m in range(fed.M)]),
    )
    return server, logs


def _concat_latents(latents: List[Optional[np.ndarray]]) -> Optional[np.ndarray]:
    if any(z is None for z in latents):
        return None
    return np.concatenate(latents)


# --- F-EM / F-GEM ---

def _em_log(
    logs: List[RoundLog],
    agents: Sequence[int],
    d: int,
    state: EMState,
    fed: FederatedDataset,
    beta_star: Optional[np.ndarray],
    grad_norm: float,
    started: float,
    phase: str,
) -> RoundLog:
    log = RoundLog(
        round=len(logs) + 1,
        broadcasts=len(agents),
        uploads=len(agents),
        scalars_sent=2 * len(agents) * (d + 1),
        rel_err=relative_error(state.beta, beta_star) if beta_star is not None else None,
        nll=_pooled_nll(fed, state.beta, state.sigma2),
        grad_norm=grad_norm,
        wall_ms=(time.perf_counter() - started) * 1000.0,
        phase=phase,
    )
    logs.append(log)
    return log


def _average_em(
    results: Dict[int, Tuple[EMState, np.ndarray, float]],
    weights: Optional[np.ndarray],
    r: int,
) -> Tuple[EMState, float]:
    beta = server_average({m: res[0].beta for m, res in results.items()}, weights)
    sigma2 = float(server_average({m: np.array([res[0].sigma2]) for m, res in results.items()}, weights)[0])
    grad = server_average({m: np.append(res[1], res[2]) for m, res in results.items()}, weights)
    if not (np.all(np.isfinite(beta)) and math.isfinite(sigma2)):
        raise SolverError("non-finite averaged parameters", iteration=r)
    return EMState(beta=beta, sigma2=sigma2), float(np.linalg.norm(grad))


def run_f_gem(
    fed: FederatedDataset,
    init: EMState,
    cfg: GEMConfig,
    fcfg: FederatedConfig,
    beta_star: Optional[np.ndarray] = None,
) -> Tuple[EMState, List[RoundLog]]:
    """One projected ascent step per agent per round, then parameter averaging."""
    _check_shards(fed)
    state = init
    logs: List[RoundLog] = []
    d = state.beta.shape[0]
    logger.info(f"F-GEM: M={fed.M}, rounds={fcfg.rounds}, alpha={cfg.alpha}")
    for r in range(fcfg.rounds):
        started = time.perf_counter()
        agents = participants(fcfg, fed.M, r)

        def local(m: int, current: EMState = state):
            d_beta, d_sigma2 = gem_grads(current, current, fed.shards[m])
            return gem_update(current, d_beta, d_sigma2, cfg.alpha, cfg.sigma2_floor), d_beta, d_sigma2

        results = _run_agents(local, agents, fcfg.workers)
        state, grad_norm = _average_em(results, _agent_weights(fcfg, fed, agents), r)
        _em_log(logs, agents, d, state, fed, beta_star, grad_norm, started, "train")
    return state, logs


def run_f_em(
    fed: FederatedDataset,
    init: EMState,
    fcfg: FederatedConfig,
    beta_star: Optional[np.ndarray] = None,
    floor: float = 1e-8,
) -> Tuple[EMState, List[RoundLog]]:
    """Federated EM: each outer step freezes the E-step weights and solves the
    M-step by averaged gradient ascent.

    The inner loop stops when the averaged gradient norm falls to ``fem_tol`` or
    after ``fem_inner_max`` rounds. ``fcfg.rounds`` caps the total number of
    communication rounds across all inner loops.
    """
    _check_shards(fed)
    state = init
    logs: List[RoundLog] = []
    d = state.beta.shape[0]
    outer = 0
    logger.info(f"F-EM: M={fed.M}, round budget={fcfg.rounds}, alpha={fcfg.fem_alpha}")
    while len(logs) < fcfg.rounds:
        frozen = state
        weights_by_agent = {m: e_weights(frozen, shard) for m, shard in enumerate(fed.shards)}
        for inner in range(fcfg.fem_inner_max):
            if len(logs) >= fcfg.rounds:
                break
            started = time.perf_counter()
            agents = participants(fcfg, fed.M, len(logs))

            def local(m: int, current: EMState = state):
                d_beta, d_sigma2 = gem_grads(current, frozen, fed.shards[m], weights_by_agent[m])
                return gem_update(current, d_beta, d_sigma2, fcfg.fem_alpha, floor), d_beta, d_sigma2

            results = _run_agents(local, agents, fcfg.workers)
            state, grad_norm = _average_em(results, _agent_weights(fcfg, fed, agents), len(logs))
            _em_log(logs, agents, d, state, fed, beta_star, grad_norm, started, "inner")
            if grad_norm <= fcfg.fem_tol:
                break
        outer += 1
        logger.debug(f"F-EM outer step {outer} done after {inner + 1} inner rounds")
    return state, logs


# --- solver registry entries ---

def _fed_result(name: str, state, logs: List[RoundLog], sigma2: float, threshold: float) -> SolverResult:
    errors = training_errors(logs)
    return SolverResult(
        algorithm=name,
        beta=state.beta,
        sigma2=sigma2,
        rounds=logs,
        state=state,
        converged=None if not errors else not did_not_converge(errors, threshold),
    )


class FWMLRSolver(BaseSolver):
    name = "f-wmlr"
    federated = True

    def __init__(self, config: WMLRConfig, fed_config: FederatedConfig):
        super().__init__(config)
        self.fed_config = fed_config

    def run(self, data: FederatedDataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        state, logs = run_f_wmlr(data, self.config, self.fed_config, beta_star=beta_star)
        return _fed_result(
            self.name, state, logs, estimate_sigma2(data.pooled(), state.beta), self.fed_config.dnc_threshold
        )


class FEMSolver(BaseSolver):
    name = "f-em"
    federated = True

    def __init__(self, config, fed_config: FederatedConfig):
        super().__init__(config)
        self.fed_config = fed_config

    def run(self, data: FederatedDataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        cfg = self.config
        init = initial_em_state(data.shards[0].d, cfg.seed, cfg.sigma2_init, cfg.init_scale)
        state, logs = run_f_em(data, init, self.fed_config, beta_star, cfg.sigma2_floor)
        return _fed_result(self.name, state, logs, state.sigma2, self.fed_config.dnc_threshold)


class FGEMSolver(BaseSolver):
    name = "f-gem"
    federated = True

    def __init__(self, config: GEMConfig, fed_config: FederatedConfig):
        super().__init__(config)
        self.fed_config = fed_config

    def run(self, data: FederatedDataset, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        cfg = self.config
        init = initial_em_state(data.shards[0].d, cfg.seed, cfg.sigma2_init, cfg.init_scale)
        state, logs = run_f_gem(data, init, cfg, self.fed_config, beta_star)
        return _fed_result(self.name, state, logs, state.sigma2, self.fed_config.dnc_threshold)
