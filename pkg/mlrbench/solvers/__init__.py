from typing import Optional, Type

from mlrbench.solvers.base import BaseSolver
from mlrbench.solvers.em import EMSolver, GEMSolver
from mlrbench.solvers.wmlr import WMLRSolver

CENTRALIZED = {"wmlr": WMLRSolver, "em": EMSolver, "gem": GEMSolver}
FEDERATED_NAMES = ("f-wmlr", "f-em", "f-gem")


def get_solver(name: str) -> Optional[Type[BaseSolver]]:
    """Returns the solver class registered under an algorithm name."""
    key = name.lower()
    if key in CENTRALIZED:
        return CENTRALIZED[key]
    if key in FEDERATED_NAMES:
        # fedsim builds on the centralized solvers, so it is imported on demand
        from mlrbench.fedsim import FEMSolver, FGEMSolver, FWMLRSolver
        return {"f-wmlr": FWMLRSolver, "f-em": FEMSolver, "f-gem": FGEMSolver}[key]
    return None


def is_supported_algorithm(name: str) -> bool:
    return get_solver(name) is not None
