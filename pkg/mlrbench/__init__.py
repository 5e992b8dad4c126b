from mlrbench.core import ExperimentConfig, run_experiment
from mlrbench.bench import SweepSpec, reproduce, sweep
from mlrbench.fedsim import FederatedConfig, run_f_em, run_f_gem, run_f_wmlr
from mlrbench.solvers.em import run_em, run_gem
from mlrbench.solvers.wmlr import run_wmlr

__all__ = [
    "ExperimentConfig", "run_experiment",
    "SweepSpec", "sweep", "reproduce",
    "FederatedConfig", "run_f_wmlr", "run_f_em", "run_f_gem",
    "run_wmlr", "run_em", "run_gem",
]
