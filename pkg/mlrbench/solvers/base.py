from abc import ABC, abstractmethod
from typing import Any, Optional

import numpy as np

from mlrbench.models import SolverResult


class BaseSolver(ABC):
    name: str = ""
    federated: bool = False

    def __init__(self, config: Any):
        self.config = config

    @abstractmethod
    def run(self, data: Any, beta_star: Optional[np.ndarray] = None) -> SolverResult:
        """Runs the solver on a Dataset (or FederatedDataset) and returns the final estimate."""
        pass
