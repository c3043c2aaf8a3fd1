"""Fairness-aware federated learning with differential privacy (FedFair / FedFDP)."""

from .errors import ConfigurationError, FormatError, InfeasibleBudgetError, LambdaSolverError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "FormatError", "InfeasibleBudgetError", "LambdaSolverError",
           "__version__"]
