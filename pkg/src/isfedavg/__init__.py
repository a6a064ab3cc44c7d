"""Federated averaging with importance sampling of agents and data."""

from .federation import (
    VARIANTS,
    AgentSpec,
    FederationConfig,
    ProbabilityState,
    run,
    run_round,
)
from .objectives import Dataset, LeastSquares, Logistic
from .sampling import cap_and_normalize, systematic_sample

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "AgentSpec",
    "Dataset",
    "FederationConfig",
    "LeastSquares",
    "Logistic",
    "ProbabilityState",
    "cap_and_normalize",
    "run",
    "run_round",
    "systematic_sample",
]
