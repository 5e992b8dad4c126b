"""Mixed linear regression generative model, data generation and evaluation metrics.

Latent labels are stored as integers ``1..k``. For the symmetric two-component
model the sign ``s = +1`` maps to label 1 (``+beta``) and ``s = -1`` to label 2.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Literal, Optional, Union

import numpy as np
from scipy.special import logsumexp, softmax

from mlrbench.models import ConfigError, DimensionError
from mlrbench.rng import stream

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8
MAX_EMPTY_BATCHES = 1000

ArrayLike = Union[np.ndarray, List[float], float]


@dataclass(frozen=True, eq=False)
class MLRParams:
    betas: np.ndarray
    sigma2: float

    def __post_init__(self):
        betas = np.atleast_2d(np.asarray(self.betas, dtype=float))
        if betas.ndim != 2 or betas.shape[0] < 1 or betas.shape[1] < 1:
            raise DimensionError(f"betas must be a (k, d) array with k, d >= 1, got shape {betas.shape}")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def k(self) -> int:
        return self.betas.shape[0]

    @property
    def d(self) -> int:
        return self.betas.shape[1]

    @classmethod
    def symmetric(cls, beta: ArrayLike, sigma2: float) -> "MLRParams":
        beta = np.asarray(beta, dtype=float).ravel()
        return cls(betas=np.stack([beta, -beta]), sigma2=sigma2)

    @property
    def is_symmetric(self) -> bool:
        return self.k == 2 and bool(np.array_equal(self.betas[1], -self.betas[0]))

    @property
    def beta_star(self) -> np.ndarray:
        """The +beta regressor of the symmetric view."""
        if not self.is_symmetric:
            raise ConfigError("symmetric view requires k = 2 and beta_2 = -beta_1")
        return self.betas[0]


@dataclass(frozen=True)
class GenConfig:
    n: int
    d: int
    snr: float = 10.0
    sigma2: float = 1.0
    x_bound: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if not self.snr > 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.x_bound is not None and not self.x_bound > 0:
            raise ConfigError(f"x_bound must be positive when set, got {self.x_bound}")

    def to_dict(self) -> dict:
        return {
            "n": self.n, "d": self.d, "snr": self.snr, "sigma2": self.sigma2,
            "x_bound": self.x_bound, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        return cls(
            n=int(raw["n"]), d=int(raw["d"]), snr=float(raw.get("snr", 10.0)),
            sigma2=float(raw.get("sigma2", 1.0)),
            x_bound=None if raw.get("x_bound") is None else float(raw["x_bound"]),
            seed=int(raw.get("seed", 0)),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    zs: Optional[np.ndarray] = None

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        ys = np.asarray(self.ys, dtype=float).ravel()
        if xs.shape[0] != ys.shape[0]:
            raise DimensionError(f"xs has {xs.shape[0]} rows but ys has {ys.shape[0]} entries")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        if self.zs is not None:
            zs = np.asarray(self.zs, dtype=np.int64).ravel()
            if zs.shape[0] != ys.shape[0]:
                raise DimensionError(f"zs has {zs.shape[0]} entries but ys has {ys.shape[0]}")
            object.__setattr__(self, "zs", zs)

    @property
    def n(self) -> int:
        return self.ys.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    def subset(self, start: int, stop: int) -> "Dataset":
        zs = None if self.zs is None else self.zs[start:stop]
        return Dataset(self.xs[start:stop], self.ys[start:stop], zs)

    @classmethod
    def concat(cls, parts: List["Dataset"]) -> "Dataset":
        if not parts:
            raise ConfigError("cannot concatenate an empty list of datasets")
        zs = None
        if all(p.zs is not None for p in parts):
            zs = np.concatenate([p.zs for p in parts])
        return cls(
            np.concatenate([p.xs for p in parts]),
            np.concatenate([p.ys for p in parts]),
            zs,
        )


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    shards: List[Dataset]
    assignment: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.assignment is not None:
            assignment = np.asarray(self.assignment, dtype=np.int64).ravel()
            if assignment.shape[0] != len(self.shards):
                raise DimensionError(
                    f"assignment has {assignment.shape[0]} entries for {len(self.shards)} shards"
                )
            object.__setattr__(self, "assignment", assignment)

    @property
    def M(self) -> int:
        return len(self.shards)

    @property
    def sizes(self) -> List[int]:
        return [s.n for s in self.shards]

    def pooled(self) -> Dataset:
        return Dataset.concat(self.shards)


def draw_beta_star(d: int, snr: float, seed: int) -> np.ndarray:
    """Draws beta* uniformly from the sphere of radius ``snr``."""
    if d < 1 or not snr > 0:
        raise ConfigError(f"need d >= 1 and snr > 0, got d={d}, snr={snr}")
    g = stream(seed, "truth").standard_normal(d)
    return snr * g / np.linalg.norm(g)


def _draw_xs(rng: np.random.Generator, n: int, d: int, bound: Optional[float]) -> np.ndarray:
    if bound is None:
        return rng.standard_normal((n, d))
    # Rejection to the ball of radius `bound`, drawn in batches.
    kept: List[np.ndarray] = []
    have = 0
    empty = 0
    while have < n:
        batch = rng.standard_normal((max(n - have, 64), d))
        batch = batch[np.linalg.norm(batch, axis=1) <= bound]
        if batch.shape[0] == 0:
            empty += 1
            if empty >= MAX_EMPTY_BATCHES:
                raise ConfigError(
                    f"x_bound={bound} is too small for d={d}: rejection sampling accepts nothing"
                )
            continue
        kept.append(batch)
        have += batch.shape[0]
    return np.concatenate(kept)[:n]


def _check_compatible(cfg: GenConfig, params: MLRParams) -> None:
    if cfg.d != params.d:
        raise DimensionError(f"GenConfig.d={cfg.d} does not match params dimension {params.d}")


def generate_dataset(cfg: GenConfig, params: MLRParams) -> Dataset:
    """Draws n samples ``y = beta_z' x + eps`` with uniform latent z and N(0, sigma2) noise."""
    _check_compatible(cfg, params)
    xs = _draw_xs(stream(cfg.seed, "data-x"), cfg.n, cfg.d, cfg.x_bound)
    zs = stream(cfg.seed, "data-latent").integers(1, params.k + 1, size=cfg.n)
    noise = stream(cfg.seed, "data-noise").standard_normal(cfg.n) * math.sqrt(params.sigma2)
    ys = np.einsum("ij,ij->i", xs, params.betas[zs - 1]) + noise
    return Dataset(xs=xs, ys=ys, zs=zs)


def generate_federated(
    cfg: GenConfig,
    params: MLRParams,
    M: int,
    per_agent_n: int,
    mode: Literal["per-sample", "per-agent"] = "per-agent",
) -> FederatedDataset:
    """Generates M agent shards of ``per_agent_n`` samples each.

    In ``per-agent`` mode every agent draws one sign ``z_m`` and all of its samples
    come from ``z_m * beta*``; ``per-sample`` mode is ``generate_dataset`` split evenly.
    ``cfg.n`` is ignored in favour of ``M * per_agent_n``.
    """
    if M < 1 or per_agent_n < 1:
        raise ConfigError(f"need M >= 1 and per_agent_n >= 1, got M={M}, per_agent_n={per_agent_n}")
    total = M * per_agent_n
    cfg = replace(cfg, n=total)

    if mode == "per-sample":
        pooled = generate_dataset(cfg, params)
        shards = [pooled.subset(m * per_agent_n, (m + 1) * per_agent_n) for m in range(M)]
        return FederatedDataset(shards=shards)

    if mode != "per-agent":
        raise ConfigError(f"Unknown federated generation mode '{mode}'")
    if not params.is_symmetric:
        raise ConfigError("per-agent generation requires the symmetric two-component model")
    _check_compatible(cfg, params)

    xs = _draw_xs(stream(cfg.seed, "data-x"), total, cfg.d, cfg.x_bound)
    agent_labels = stream(cfg.seed, "data-latent").integers(1, 3, size=M)
    zs = np.repeat(agent_labels, per_agent_n)
    noise = stream(cfg.seed, "data-noise").standard_normal(total) * math.sqrt(params.sigma2)
    ys = np.einsum("ij,ij->i", xs, params.betas[zs - 1]) + noise
    pooled = Dataset(xs=xs, ys=ys, zs=zs)
    shards = [pooled.subset(m * per_agent_n, (m + 1) * per_agent_n) for m in range(M)]
    logger.debug(f"Generated {M} agent shards, {int(np.sum(agent_labels == 1))} on +beta")
    return FederatedDataset(shards=shards, assignment=agent_labels)


def bayes_posterior(params: MLRParams, x: ArrayLike, y: ArrayLike) -> np.ndarray:
    """Posterior over components for one sample (length-k vector) or a batch ((n, k) array)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != params.d:
        raise DimensionError(f"x has dimension {X.shape[1]}, params have {params.d}")
    Y = np.atleast_1d(np.asarray(y, dtype=float))
    logits = -((Y[:, None] - X @ params.betas.T) ** 2) / (2.0 * params.sigma2)
    post = softmax(logits, axis=1)
    return post[0] if single else post


def oracle_transport(src: MLRParams, dst: MLRParams, x: ArrayLike, y: ArrayLike, z: ArrayLike) -> np.ndarray:
    """Randomized transport map: shifts y by ``(beta_z^dst - beta_z^src)' x`` using the true label."""
    if src.k != dst.k or src.d != dst.d:
        raise DimensionError("src and dst must share k and d")
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=np.int64)
    if np.any(z < 1) or np.any(z > src.k):
        raise ConfigError(f"latent label out of range 1..{src.k}")
    shift = dst.betas - src.betas
    if x.ndim == 1:
        return float(y) + float(shift[int(z) - 1] @ x)
    return np.asarray(y, dtype=float) + np.einsum("ij,ij->i", x, shift[z - 1])


def symmetrize(data: Dataset, beta_bar: ArrayLike) -> Dataset:
    beta_bar = np.asarray(beta_bar, dtype=float).ravel()
    if beta_bar.shape[0] != data.d:
        raise DimensionError(f"beta_bar has dimension {beta_bar.shape[0]}, data has {data.d}")
    return Dataset(xs=data.xs, ys=data.ys - data.xs @ beta_bar, zs=data.zs)


def relative_error(beta_hat: ArrayLike, beta_star: ArrayLike, sign_aware: bool = True) -> float:
    beta_hat = np.asarray(beta_hat, dtype=float).ravel()
    beta_star = np.asarray(beta_star, dtype=float).ravel()
    if beta_hat.shape != beta_star.shape:
        raise DimensionError(f"shape mismatch {beta_hat.shape} vs {beta_star.shape}")
    scale = np.linalg.norm(beta_star)
    if scale == 0:
        raise ConfigError("relative error is undefined for beta* = 0")
    err = np.linalg.norm(beta_hat - beta_star)
    if sign_aware:
        err = min(err, np.linalg.norm(beta_hat + beta_star))
    return float(err / scale)


def nll_symmetric(data: Dataset, beta: ArrayLike, sigma2: float) -> float:
    """Average negative log-likelihood under the symmetric model ``1/2 N(b'x, s2) + 1/2 N(-b'x, s2)``."""
    if not sigma2 > 0:
        raise ConfigError(f"sigma2 must be positive, got {sigma2}")
    mean = data.xs @ np.asarray(beta, dtype=float).ravel()
    log_norm = -0.5 * math.log(2.0 * math.pi * sigma2)
    plus = log_norm - (data.ys - mean) ** 2 / (2.0 * sigma2)
    minus = log_norm - (data.ys + mean) ** 2 / (2.0 * sigma2)
    ll = logsumexp(np.stack([plus, minus]), axis=0) + math.log(0.5)
    return float(-np.mean(ll))


def estimate_sigma2(data: Dataset, beta: ArrayLike, floor: float = SIGMA2_FLOOR) -> float:
    """Noise variance from ``E[y^2] - ||beta||^2``, clamped below at ``floor``.

    A ``(k, d)`` array of regressors uses the mean squared norm over components.
    """
    betas = np.atleast_2d(np.asarray(beta, dtype=float))
    raw = float(np.mean(data.ys ** 2) - np.mean(np.sum(betas ** 2, axis=1)))
    if raw < floor:
        logger.debug(f"sigma2 estimate {raw:.3g} clamped to {floor}")
        return floor
    return raw
