import importlib.resources
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

import jsonschema
import numpy as np

from mlrbench.fedsim import (
    FederatedConfig,
    convergence_round,
    did_not_converge,
    training_errors,
)
from mlrbench.mlr_model import (
    GenConfig,
    MLRParams,
    draw_beta_star,
    generate_dataset,
    generate_federated,
)
from mlrbench.models import ConfigError, SolverResult
from mlrbench.persistence import load_dataset, load_federated, read_json, write_json, write_rounds, write_trace
from mlrbench.solvers import get_solver, is_supported_algorithm
from mlrbench.solvers.em import EMConfig, GEMConfig
from mlrbench.solvers.wmlr import WMLRConfig

logger = logging.getLogger(__name__)

CENTRALIZED_ALGORITHMS = ("wmlr", "em", "gem")
FEDERATED_ALGORITHMS = ("f-wmlr", "f-em", "f-gem")

SolverConfig = Union[WMLRConfig, EMConfig, GEMConfig]


def solver_config_class(algorithm: str):
    base = algorithm.lower().replace("f-", "", 1)
    return {"wmlr": WMLRConfig, "em": EMConfig, "gem": GEMConfig}[base]


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: data law, algorithm and its settings, where to write results."""
    algorithm: Literal["wmlr", "em", "gem", "f-wmlr", "f-em", "f-gem"] = "wmlr"
    gen: GenConfig = field(default_factory=lambda: GenConfig(n=10_000, d=128))
    scenario: Optional[Literal["centralized", "federated"]] = None
    fed: Optional[FederatedConfig] = None
    solver: Optional[SolverConfig] = None
    data_path: Optional[str] = None
    eval_against: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if not is_supported_algorithm(self.algorithm):
            raise ConfigError(f"Unknown algorithm '{self.algorithm}'")
        object.__setattr__(self, "algorithm", self.algorithm.lower())
        federated = self.algorithm in FEDERATED_ALGORITHMS
        expected = "federated" if federated else "centralized"
        if self.scenario is None:
            object.__setattr__(self, "scenario", expected)
        elif self.scenario != expected:
            raise ConfigError(f"algorithm '{self.algorithm}' requires the {expected} scenario, got '{self.scenario}'")
        if federated and self.fed is None:
            raise ConfigError("the federated scenario requires 'fed' settings")
        if not federated and self.fed is not None:
            raise ConfigError(f"'fed' settings given for centralized algorithm '{self.algorithm}'")
        cls = solver_config_class(self.algorithm)
        if self.solver is None:
            object.__setattr__(self, "solver", cls())
        elif not isinstance(self.solver, cls):
            raise ConfigError(f"algorithm '{self.algorithm}' takes {cls.__name__}, got {type(self.solver).__name__}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @property
    def federated(self) -> bool:
        return self.scenario == "federated"

    def seeded(self) -> "ExperimentConfig":
        """Copies the master seed into every sub-config."""
        return replace(
            self,
            gen=replace(self.gen, seed=self.seed),
            fed=None if self.fed is None else replace(self.fed, seed=self.seed),
            solver=replace(self.solver, seed=self.seed),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "algorithm": self.algorithm,
            "gen": self.gen.to_dict(),
            "fed": None if self.fed is None else self.fed.to_dict(),
            "solver": self.solver.to_dict(),
            "data_path": self.data_path,
            "eval_against": self.eval_against,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        known = {"scenario", "algorithm", "gen", "fed", "solver", "data_path", "eval_against", "output_dir", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"Unknown experiment settings: {sorted(unknown)}")
        algorithm = str(raw.get("algorithm", "wmlr")).lower()
        if not is_supported_algorithm(algorithm):
            raise ConfigError(f"Unknown algorithm '{algorithm}'")
        try:
            gen = GenConfig.from_dict(raw["gen"]) if raw.get("gen") is not None else GenConfig(n=10_000, d=128)
        except KeyError as e:
            raise ConfigError(f"gen settings missing field {e}") from e
        fed = FederatedConfig.from_dict(raw["fed"]) if raw.get("fed") is not None else None
        solver = solver_config_class(algorithm).from_dict(raw.get("solver") or {})
        return cls(
            algorithm=algorithm,
            gen=gen,
            scenario=raw.get("scenario"),
            fed=fed,
            solver=solver,
            data_path=raw.get("data_path"),
            eval_against=raw.get("eval_against"),
            output_dir=raw.get("output_dir"),
            seed=int(raw.get("seed", 0)),
        )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return ExperimentConfig.from_dict(raw)


def load_beta_star(path: Union[str, Path], d: int) -> np.ndarray:
    """Reads beta* from a JSON list or an object with a ``beta_star`` list."""
    raw = read_json(path)
    if isinstance(raw, dict):
        raw = raw.get("beta_star")
    beta = np.asarray(raw, dtype=float)
    if beta.shape[-1:] != (d,):
        raise ConfigError(f"beta* in {path} must have dimension {d}, got shape {beta.shape}")
    return beta


def summary_schema() -> Dict[str, Any]:
    return json.loads(importlib.resources.read_text("mlrbench.schemas", "summary.schema.json"))


def validate_summary(summary: Dict[str, Any]) -> None:
    try:
        jsonschema.validate(summary, summary_schema())
    except jsonschema.ValidationError as e:
        raise ConfigError(f"summary does not match its schema: {e.message}") from e


def prepare_data(cfg: ExperimentConfig):
    """Returns ``(data, beta_star)`` for a seeded config, loading or generating the data."""
    gen = cfg.gen
    beta_star = None
    if cfg.eval_against:
        beta_star = load_beta_star(cfg.eval_against, gen.d)
    if cfg.data_path:
        data = load_federated(cfg.data_path) if cfg.federated else load_dataset(cfg.data_path)
        return data, beta_star

    if beta_star is None:
        beta_star = draw_beta_star(gen.d, gen.snr, gen.seed)
    params = MLRParams.symmetric(beta_star, gen.sigma2)
    if cfg.federated:
        data = generate_federated(gen, params, cfg.fed.M, cfg.fed.per_agent_n, cfg.fed.data_mode)
    else:
        data = generate_dataset(gen, params)
    return data, beta_star


def build_solver(cfg: ExperimentConfig):
    cls = get_solver(cfg.algorithm)
    if cfg.federated:
        return cls(cfg.solver, cfg.fed)
    return cls(cfg.solver)


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if np.isfinite(value) else None


def summarize(cfg: ExperimentConfig, result: SolverResult, wall_ms: float, files: Dict[str, str]) -> Dict[str, Any]:
    if result.rounds is not None:
        errors = training_errors(result.rounds)
        nlls = [r.nll for r in result.rounds if r.phase != "reference" and r.nll is not None]
        final_nll = nlls[-1] if nlls else None
        iterations = len(errors)
        scalars = sum(r.scalars_sent for r in result.rounds)
        threshold = cfg.fed.dnc_threshold
    else:
        errors = result.trace.rel_errs()
        final_nll = result.trace.final.nll if result.trace.final else None
        iterations = len(result.trace) - 1
        scalars = 0
        threshold = FederatedConfig().dnc_threshold
    conv = convergence_round(errors) if errors else None
    return {
        "algorithm": cfg.algorithm,
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "final_rel_err": _finite_or_none(errors[-1]) if errors else None,
        "final_nll": _finite_or_none(final_nll),
        "final_sigma2": _finite_or_none(result.sigma2),
        "convergence_round": conv,
        "did_not_converge": did_not_converge(errors, threshold) if errors else None,
        "iterations": iterations,
        "communication_rounds": len(result.rounds) if result.rounds is not None else 0,
        "scalars_sent": scalars,
        "wall_ms": wall_ms,
        "config": cfg.to_dict(),
        "files": files,
    }


def run_experiment(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Generates (or loads) data, runs the configured solver and writes its outputs.

    With ``output_dir`` set, writes ``trace.csv`` (centralized) or ``rounds.csv``
    (federated) and ``summary.json``. Returns the summary record.
    """
    cfg = cfg.seeded()
    data, beta_star = prepare_data(cfg)
    solver = build_solver(cfg)
    logger.info(f"Running {cfg.algorithm} (seed={cfg.seed})")
    started = time.perf_counter()
    result = solver.run(data, beta_star=beta_star)
    wall_ms = (time.perf_counter() - started) * 1000.0

    files: Dict[str, str] = {}
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        if result.rounds is not None:
            files["rounds"] = str(write_rounds(result.rounds, out / "rounds.csv"))
        else:
            files["trace"] = str(write_trace(result.trace, out / "trace.csv"))
        files["summary"] = str(out / "summary.json")

    summary = summarize(cfg, result, wall_ms, files)
    validate_summary(summary)
    if cfg.output_dir:
        write_json(summary, Path(cfg.output_dir) / "summary.json")
    rel = summary["final_rel_err"]
    logger.info(f"{cfg.algorithm}: final rel_err={rel}, nll={summary['final_nll']}, {wall_ms:.0f} ms")
    return summary
