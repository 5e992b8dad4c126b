import math
from dataclasses import dataclass, field, fields
from typing import Any, List, Optional


class MLRBenchError(Exception):
    exit_code = 2


class ConfigError(MLRBenchError):
    exit_code = 1


class DimensionError(ConfigError):
    pass


class SolverError(MLRBenchError):
    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class SingularCovarianceError(SolverError):
    pass


class BracketError(SolverError):
    pass


class AcceptanceError(MLRBenchError):
    exit_code = 3


TRACE_COLUMNS = [
    "iter", "objective", "data_term", "model_term", "reg_term",
    "grad_beta_norm", "rel_err", "nll", "wall_ms",
]

ROUND_COLUMNS = [
    "round", "broadcasts", "uploads", "scalars_sent",
    "rel_err", "nll", "grad_norm", "wall_ms",
]


@dataclass
class TraceRow:
    iter: int
    objective: float
    grad_beta_norm: float
    data_term: Optional[float] = None
    model_term: Optional[float] = None
    reg_term: Optional[float] = None
    rel_err: Optional[float] = None
    nll: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class Trace:
    """Per-iteration record of a centralized solver run."""
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def rel_errs(self) -> List[float]:
        return [r.rel_err for r in self.rows if r.rel_err is not None]

    @property
    def final(self) -> Optional[TraceRow]:
        return self.rows[-1] if self.rows else None

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class RoundLog:
    round: int
    broadcasts: int
    uploads: int
    scalars_sent: int
    rel_err: Optional[float] = None
    nll: Optional[float] = None
    grad_norm: Optional[float] = None
    wall_ms: float = 0.0
    # "reference" (federated power iteration), "train" or "inner" (F-EM M-step rounds)
    phase: str = "train"


def row_values(record, columns: List[str]) -> List[str]:
    """Formats a record for CSV: 17 significant digits, empty cells for missing values."""
    names = {f.name for f in fields(record)}
    out = []
    for col in columns:
        if col not in names:
            raise KeyError(f"Unknown column '{col}' for {type(record).__name__}")
        value = getattr(record, col)
        if value is None:
            out.append("")
        elif isinstance(value, int) and not isinstance(value, bool):
            out.append(str(value))
        elif isinstance(value, float) and not math.isfinite(value):
            out.append(repr(value))
        else:
            out.append(format(float(value), ".17g"))
    return out


@dataclass
class SolverResult:
    """Final estimate of a solver run plus its per-iteration or per-round record."""
    algorithm: str
    beta: Any
    sigma2: float
    trace: Optional[Trace] = None
    rounds: Optional[List[RoundLog]] = None
    state: Any = None
    converged: Optional[bool] = None
