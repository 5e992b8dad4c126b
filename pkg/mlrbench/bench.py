"""Hyperparameter sweeps, preset experiment matrices and table reproduction.

Reproduced cells are cached by the md5 of their canonical config JSON, the
same way a cell's result is keyed for reuse across ``reproduce`` invocations.
"""
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from mlrbench.core import ExperimentConfig, run_experiment
from mlrbench.fedsim import FederatedConfig
from mlrbench.mlr_model import GenConfig
from mlrbench.models import ConfigError, MLRBenchError, SolverError
from mlrbench.persistence import atomic_write_text, csv_text, write_json
from mlrbench.solvers.em import EMConfig, GEMConfig
from mlrbench.solvers.wmlr import WMLRConfig

logger = logging.getLogger(__name__)

CACHE_DIR = os.environ.get("MLRBENCH_CACHE_DIR", ".mlrbench_cache")
CACHE_FILE = "cells.json"

TABLES = ("table1", "table2", "table4")
SCALES = ("paper", "desk")
# content names accepted in place of the table and scale names
TABLE_ALIASES = {"centralized": "table1", "federated": "table2", "repeatability": "table4"}
SCALE_ALIASES = {"full": "paper"}

# Tuned values per algorithm and SNR
CENTRAL_LAMBDA = {1.0: 0.38, 10.0: 0.53}
GEM_ALPHA = 2.78
# one lambda, selected by the F-WMLR sweep at SNR 10 and reused at every SNR
FED_LAMBDA = 0.41
FED_LAMBDA_SNR = 10.0
FGEM_ALPHA = {1.0: 2.98, 5.0: 0.89, 10.0: 0.48, 20.0: 0.14}
FEM_ALPHA = 0.08


# --- sweeps ---

@dataclass(frozen=True)
class SweepSpec:
    parameter: Literal["lambda", "alpha"] = "lambda"
    count: int = 10
    lo: float = 0.1
    hi: float = 2.0
    spacing: Literal["log", "linear"] = "log"
    selection: Literal["min_final_nll", "fastest_convergence"] = "min_final_nll"

    def __post_init__(self):
        if self.parameter not in ("lambda", "alpha"):
            raise ConfigError(f"Unknown sweep parameter '{self.parameter}'")
        if self.spacing not in ("log", "linear"):
            raise ConfigError(f"Unknown grid spacing '{self.spacing}'")
        if self.selection not in ("min_final_nll", "fastest_convergence"):
            raise ConfigError(f"Unknown selection rule '{self.selection}'")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.count >= 2 and not self.lo < self.hi:
            raise ConfigError(f"need lo < hi, got lo={self.lo}, hi={self.hi}")
        if self.count == 1 and self.lo != self.hi:
            raise ConfigError("a single-point grid needs lo == hi")
        if self.spacing == "log" and not self.lo > 0:
            raise ConfigError(f"log spacing needs lo > 0, got {self.lo}")

    def points(self) -> List[float]:
        if self.count == 1:
            return [float(self.lo)]
        if self.spacing == "log":
            grid = 10.0 ** np.linspace(math.log10(self.lo), math.log10(self.hi), self.count)
        else:
            grid = np.linspace(self.lo, self.hi, self.count)
        return [float(v) for v in grid]

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter, "count": self.count, "lo": self.lo, "hi": self.hi,
            "spacing": self.spacing, "selection": self.selection,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown sweep settings: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class SweepPoint:
    value: float
    summary: Optional[Dict[str, Any]] = None
    error: Optional[str] = None


SWEEP_COLUMNS = ["value", "final_rel_err", "final_nll", "convergence_round", "did_not_converge", "error"]


def with_parameter(cfg: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    """The config with one hyperparameter set; lambda also resets the step-size heuristic."""
    solver = cfg.solver
    if parameter == "lambda":
        if not isinstance(solver, WMLRConfig):
            raise ConfigError(f"lambda sweeps need a WMLR algorithm, got '{cfg.algorithm}'")
        alpha_max = 1.0 / (2.0 * value)
        return replace(cfg, solver=replace(solver, lam=value, alpha_max=alpha_max, alpha_min=alpha_max / 10.0))
    if isinstance(solver, GEMConfig):
        return replace(cfg, solver=replace(solver, alpha=value))
    if cfg.algorithm == "f-em":
        return replace(cfg, fed=replace(cfg.fed, fem_alpha=value))
    raise ConfigError(f"alpha sweeps need GEM, F-GEM or F-EM, got '{cfg.algorithm}'")


def _selection_key(spec: SweepSpec, point: SweepPoint) -> Tuple:
    s = point.summary
    if spec.selection == "min_final_nll":
        nll = s["final_nll"]
        return (nll is None, nll if nll is not None else math.inf, point.value)
    conv = s["convergence_round"]
    return (bool(s["did_not_converge"]), conv if conv is not None else math.inf, point.value)


def select_point(spec: SweepSpec, points: Sequence[SweepPoint]) -> SweepPoint:
    ok = [p for p in points if p.summary is not None]
    if not ok:
        raise SolverError(f"all {len(points)} sweep points failed")
    return min(ok, key=lambda p: _selection_key(spec, p))


def _sweep_cell(value: Any) -> str:
    if value is None:
        return ""
    return format(value, ".17g") if isinstance(value, float) else str(value)


def _sweep_csv(points: Sequence[SweepPoint]) -> str:
    rows = []
    for p in points:
        s = p.summary or {}
        rows.append([_sweep_cell(p.value)] + [_sweep_cell(s.get(col)) for col in SWEEP_COLUMNS[1:-1]] + [p.error or ""])
    return csv_text(SWEEP_COLUMNS, rows)


def sweep(cfg: ExperimentConfig, spec: SweepSpec, workers: int = 1) -> Tuple[ExperimentConfig, List[SweepPoint]]:
    """Runs every grid point on the same data seed and picks one by ``spec.selection``.

    Ties go to the smaller parameter value. Writes ``sweep.csv`` (and the
    winner's outputs under ``best/``) when the config has an ``output_dir``.
    """
    values = spec.points()
    base = replace(cfg, output_dir=None)
    configs = [with_parameter(base, spec.parameter, v) for v in values]

    def evaluate(i: int) -> SweepPoint:
        try:
            return SweepPoint(value=values[i], summary=run_experiment(configs[i]))
        except MLRBenchError as e:
            logger.warning(f"sweep point {spec.parameter}={values[i]:.4g} failed: {e}")
            return SweepPoint(value=values[i], error=str(e))

    logger.info(f"Sweeping {spec.parameter} over {len(values)} points ({spec.selection})")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(evaluate, range(len(values))))
    else:
        points = [evaluate(i) for i in range(len(values))]

    best = select_point(spec, points)
    best_cfg = configs[values.index(best.value)]
    logger.info(f"Selected {spec.parameter}={best.value:.4g}")
    if cfg.output_dir:
        atomic_write_text(Path(cfg.output_dir) / "sweep.csv", _sweep_csv(points))
        best_cfg = replace(best_cfg, output_dir=str(Path(cfg.output_dir) / "best"))
        run_experiment(best_cfg)
    return best_cfg, points


# --- presets ---

def centralized_config(algorithm: str, snr: float, n: int, T: int = 100, d: int = 128, seed: int = 0) -> ExperimentConfig:
    snr = float(snr)
    if algorithm == "wmlr":
        solver = WMLRConfig(lam=CENTRAL_LAMBDA.get(snr, 0.5), T=T)
    elif algorithm == "gem":
        solver = GEMConfig(alpha=GEM_ALPHA, T=T)
    elif algorithm == "em":
        solver = EMConfig(T=T)
    else:
        raise ConfigError(f"'{algorithm}' is not a centralized algorithm")
    return ExperimentConfig(algorithm=algorithm, gen=GenConfig(n=n, d=d, snr=snr), solver=solver, seed=seed)


def federated_config(
    algorithm: str,
    snr: float,
    M: int,
    rounds: int,
    per_agent_n: int = 10,
    d: int = 128,
    seed: int = 0,
    lam: float = FED_LAMBDA,
) -> ExperimentConfig:
    snr = float(snr)
    fed = FederatedConfig(M=M, per_agent_n=per_agent_n, rounds=rounds, fem_alpha=FEM_ALPHA)
    if algorithm == "f-wmlr":
        solver = WMLRConfig(lam=lam, T=rounds)
    elif algorithm == "f-gem":
        solver = GEMConfig(alpha=FGEM_ALPHA.get(snr, 0.48), T=rounds)
    elif algorithm == "f-em":
        solver = EMConfig(T=rounds)
    else:
        raise ConfigError(f"'{algorithm}' is not a federated algorithm")
    return ExperimentConfig(
        algorithm=algorithm,
        gen=GenConfig(n=M * per_agent_n, d=d, snr=snr),
        fed=fed,
        solver=solver,
        seed=seed,
    )


PRESETS: Dict[str, Callable[[], ExperimentConfig]] = {
    "centralized-snr10-n10k": lambda: centralized_config("wmlr", 10, 10_000),
    "centralized-snr10-n100k": lambda: centralized_config("wmlr", 10, 100_000),
    "centralized-snr1-n10k": lambda: centralized_config("wmlr", 1, 10_000),
    "centralized-snr1-n100k": lambda: centralized_config("wmlr", 1, 100_000),
    "federated-snr10-m1k": lambda: federated_config("f-wmlr", 10, 1_000, 200),
    "federated-snr10-m10k": lambda: federated_config("f-wmlr", 10, 10_000, 500),
}


def get_preset(name: str, algorithm: Optional[str] = None) -> ExperimentConfig:
    """A named experiment; ``algorithm`` swaps in another solver with its tuned settings."""
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'. Available: {', '.join(sorted(PRESETS))}")
    cfg = PRESETS[name]()
    if algorithm is None or algorithm == cfg.algorithm:
        return cfg
    if cfg.federated:
        return federated_config(algorithm, cfg.gen.snr, cfg.fed.M, cfg.fed.rounds, cfg.fed.per_agent_n, cfg.gen.d)
    return centralized_config(algorithm, cfg.gen.snr, cfg.gen.n, cfg.solver.T, cfg.gen.d)


def select_federated_lambda(
    M: int = 1_000,
    rounds: int = 200,
    per_agent_n: int = 10,
    d: int = 128,
    spec: Optional[SweepSpec] = None,
    workers: int = 1,
) -> float:
    """F-WMLR lambda chosen by a sweep at ``FED_LAMBDA_SNR``, for reuse at every other SNR."""
    spec = spec or SweepSpec(parameter="lambda", lo=0.1, hi=2.0)
    if spec.parameter != "lambda":
        raise ConfigError("the federated lambda sweep needs parameter 'lambda'")
    cfg = federated_config("f-wmlr", FED_LAMBDA_SNR, M, rounds, per_agent_n, d)
    best, _ = sweep(cfg, spec, workers=workers)
    return best.solver.lam


# --- table reproduction ---

@dataclass(frozen=True)
class Band:
    """Acceptance band on one summary metric; ``expect`` pins a boolean metric."""
    metric: str
    lo: Optional[float] = None
    hi: Optional[float] = None
    expect: Optional[bool] = None

    def check(self, value: Any) -> bool:
        if self.expect is not None:
            return value is not None and bool(value) == self.expect
        if value is None or not math.isfinite(float(value)):
            return False
        if self.lo is not None and value < self.lo:
            return False
        if self.hi is not None and value > self.hi:
            return False
        return True

    def describe(self) -> str:
        if self.expect is not None:
            return f"{self.metric} = {self.expect}"
        if self.lo is not None and self.hi is not None:
            return f"{self.lo:g} <= {self.metric} <= {self.hi:g}"
        if self.hi is not None:
            return f"{self.metric} <= {self.hi:g}"
        return f"{self.metric} >= {self.lo:g}"


@dataclass(frozen=True)
class Cell:
    table: str
    name: str
    cfg: ExperimentConfig
    bands: Tuple[Band, ...] = ()
    repeats: int = 1


@dataclass(frozen=True)
class Relation:
    """A cross-cell check, e.g. one cell's NLL not above another's."""
    description: str
    lhs: str
    rhs: str
    metric: str
    factor: float = 1.0
    op: Literal["<=", ">="] = "<="

    def check(self, values: Dict[str, Dict[str, Any]]) -> Optional[bool]:
        a = values.get(self.lhs, {}).get(self.metric)
        b = values.get(self.rhs, {}).get(self.metric)
        if a is None or b is None:
            return False
        if self.op == "<=":
            return a <= self.factor * b
        return a >= self.factor * b


@dataclass
class CellOutcome:
    cell: Cell
    summaries: List[Dict[str, Any]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)
    values: Dict[str, Any] = field(default_factory=dict)
    quartiles: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    checks: List[Tuple[Band, bool]] = field(default_factory=list)

    @property
    def passed(self) -> Optional[bool]:
        if self.errors and not self.summaries:
            return False
        if not self.checks:
            return None
        return all(ok for _, ok in self.checks)


@dataclass
class TableReport:
    table: str
    scale: str
    cells: List[CellOutcome]
    relations: List[Tuple[Relation, Optional[bool]]]

    @property
    def passed(self) -> bool:
        cell_ok = all(c.passed is not False for c in self.cells)
        return cell_ok and all(ok is not False for _, ok in self.relations)


def _centralized_cells(scale: str) -> Tuple[List[Cell], List[Relation]]:
    cells = [
        Cell("table1", "snr10-n10k-wmlr", centralized_config("wmlr", 10, 10_000), (Band("final_rel_err", hi=5e-2),)),
        Cell("table1", "snr10-n10k-em", centralized_config("em", 10, 10_000), (Band("final_rel_err", 6e-2, 2.5e-1),)),
        Cell("table1", "snr10-n10k-gem", centralized_config("gem", 10, 10_000)),
    ]
    snr1 = (Band("final_rel_err", 4e-2, 1.5e-1), Band("final_nll", 1.64, 1.68))
    cells += [Cell("table1", f"snr1-n100k-{a}", centralized_config(a, 1, 100_000), snr1) for a in ("wmlr", "em", "gem")]
    if scale == "paper":
        cells += [Cell("table1", f"snr10-n100k-{a}", centralized_config(a, 10, 100_000)) for a in ("wmlr", "em", "gem")]
        cells += [Cell("table1", f"snr1-n10k-{a}", centralized_config(a, 1, 10_000)) for a in ("wmlr", "em", "gem")]
    relations = [Relation("WMLR NLL <= EM NLL (SNR 10, n=10k)", "snr10-n10k-wmlr", "snr10-n10k-em", "final_nll")]
    return cells, relations


def _federated_cells(scale: str, lam: float = FED_LAMBDA) -> Tuple[List[Cell], List[Relation]]:
    """Every F-WMLR cell runs with the same ``lam``, whatever its SNR."""
    M = 1_000 if scale == "desk" else 10_000
    budget = {"f-wmlr": 200, "f-gem": 2_000, "f-em": 2_000} if scale == "desk" else {
        "f-wmlr": 500, "f-gem": 20_000, "f-em": 5_000,
    }
    cells = []
    for snr in (1, 5, 10, 20):
        wmlr_bands: Tuple[Band, ...] = (Band("did_not_converge", expect=False),)
        if snr == 10:
            wmlr_bands += (Band("final_rel_err", hi=2.5e-2), Band("convergence_round", hi=budget["f-wmlr"]))
        cells.append(Cell("table2", f"snr{snr}-f-wmlr", federated_config("f-wmlr", snr, M, budget["f-wmlr"], lam=lam), wmlr_bands))
        cells.append(Cell("table2", f"snr{snr}-f-gem", federated_config("f-gem", snr, M, budget["f-gem"])))
        em_bands = (Band("did_not_converge", expect=True),) if snr >= 5 else ()
        cells.append(Cell("table2", f"snr{snr}-f-em", federated_config("f-em", snr, M, budget["f-em"]), em_bands))
    relations = [
        Relation("F-GEM needs >= 5x the rounds of F-WMLR (SNR 20)", "snr20-f-gem", "snr20-f-wmlr",
                 "convergence_round", factor=5.0, op=">="),
    ]
    return cells, relations


def _repeatability_cells(scale: str) -> Tuple[List[Cell], List[Relation]]:
    repeats = 10 if scale == "desk" else 50
    settings = [(10, 10_000), (1, 100_000)]
    if scale == "paper":
        settings += [(10, 100_000), (1, 10_000)]
    cells = []
    for snr, n in settings:
        for a in ("wmlr", "em"):
            bands: Tuple[Band, ...] = ()
            if (snr, n) == (10, 10_000):
                bands = (Band("final_rel_err", hi=5e-2),) if a == "wmlr" else (Band("final_rel_err", 6e-2, 2.5e-1),)
            elif (snr, n) == (1, 100_000):
                bands = (Band("final_rel_err", 4e-2, 1.5e-1), Band("final_nll", 1.64, 1.68))
            tag = f"snr{snr}-n{n // 1000}k-{a}"
            cells.append(Cell("table4", tag, centralized_config(a, snr, n), bands, repeats=repeats))
    return cells, []


TABLE_BUILDERS = {"table1": _centralized_cells, "table2": _federated_cells, "table4": _repeatability_cells}


def resolve_table(table: str, scale: str) -> Tuple[str, str]:
    """Canonical ``(table, scale)``; content aliases such as ``centralized`` or ``full`` are accepted."""
    table = TABLE_ALIASES.get(table, table)
    scale = SCALE_ALIASES.get(scale, scale)
    if table not in TABLE_BUILDERS:
        available = ", ".join(list(TABLES) + sorted(TABLE_ALIASES))
        raise ConfigError(f"Unknown table '{table}'. Available: {available}")
    if scale not in SCALES:
        available = ", ".join(list(SCALES) + sorted(SCALE_ALIASES))
        raise ConfigError(f"Unknown scale '{scale}'. Available: {available}")
    return table, scale


def table_cells(table: str, scale: str, fed_lambda: float = FED_LAMBDA) -> Tuple[List[Cell], List[Relation]]:
    table, scale = resolve_table(table, scale)
    if table == "table2":
        return _federated_cells(scale, fed_lambda)
    return TABLE_BUILDERS[table](scale)


def cache_key(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.md5(canonical.encode("utf-8")).hexdigest()


def load_cell_cache(cache_dir: str = CACHE_DIR) -> Dict[str, Any]:
    path = os.path.join(cache_dir, CACHE_FILE)
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except Exception as e:
            logger.warning(f"Ignoring unreadable cache {path}: {e}")
    return {}


def save_cell_cache(cache: Dict[str, Any], cache_dir: str = CACHE_DIR) -> None:
    try:
        write_json(cache, Path(cache_dir) / CACHE_FILE)
    except Exception as e:
        logger.warning(f"Failed to save cache: {e}")


def _aggregate(outcome: CellOutcome) -> None:
    metrics = ("final_rel_err", "final_nll", "convergence_round", "did_not_converge")
    summaries = outcome.summaries
    if not summaries:
        return
    for m in metrics:
        vals = [s.get(m) for s in summaries]
        if m == "did_not_converge":
            outcome.values[m] = None if any(v is None for v in vals) else any(vals)
            continue
        nums = [float(v) for v in vals if v is not None]
        if len(nums) < len(vals) or not nums:
            outcome.values[m] = None
            continue
        outcome.values[m] = float(np.median(nums))
        if len(nums) > 1:
            lo, hi = np.percentile(nums, [25, 75])
            outcome.quartiles[m] = (float(lo), float(hi))
    outcome.checks = [(band, band.check(outcome.values.get(band.metric))) for band in outcome.cell.bands]


def run_cell(cell: Cell, cache: Optional[Dict[str, Any]] = None) -> CellOutcome:
    """Runs every repetition of a cell (seeds 0..repeats-1), reusing cached summaries."""
    outcome = CellOutcome(cell=cell)
    for r in range(cell.repeats):
        cfg = replace(cell.cfg, seed=cell.cfg.seed + r)
        key = cache_key(cfg)
        if cache is not None and key in cache:
            outcome.summaries.append(cache[key])
            continue
        try:
            summary = run_experiment(cfg)
        except MLRBenchError as e:
            logger.warning(f"cell {cell.name} (seed {cfg.seed}) failed: {e}")
            outcome.errors.append(str(e))
            continue
        outcome.summaries.append(summary)
        if cache is not None:
            cache[key] = summary
    _aggregate(outcome)
    return outcome


def reproduce(
    table: str,
    scale: str = "desk",
    workers: int = 1,
    use_cache: bool = True,
    cache_dir: str = CACHE_DIR,
    fed_lambda: float = FED_LAMBDA,
) -> TableReport:
    """Runs a table's preset cells and checks each against its acceptance band.

    ``fed_lambda`` is the single F-WMLR lambda used by every ``table2`` cell; pass
    the result of ``select_federated_lambda`` to retune it.
    """
    table, scale = resolve_table(table, scale)
    cells, relations = table_cells(table, scale, fed_lambda)
    cache = load_cell_cache(cache_dir) if use_cache else None
    logger.info(f"Reproducing {table} at {scale} scale: {len(cells)} cells")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda c: run_cell(c, cache), cells))
    else:
        outcomes = [run_cell(c, cache) for c in cells]
    if cache is not None:
        save_cell_cache(cache, cache_dir)

    values = {o.cell.name: o.values for o in outcomes}
    checked = [(rel, rel.check(values)) for rel in relations]
    report = TableReport(table=table, scale=scale, cells=outcomes, relations=checked)
    logger.info(f"{table}: {'PASS' if report.passed else 'FAIL'}")
    return report
