"""Federated optimization with locally adaptive stochastic Polyak stepsizes."""

__version__ = "0.1.0"

from fedsps.errors import (
    CheckSkipped,
    DegenerateGradient,
    FedSpsError,
    InsufficientData,
    LowerBoundViolated,
    NumericalDivergence,
    OptimumNotFound,
    ParseError,
    PartitionInfeasible,
)

__all__ = [
    "CheckSkipped",
    "DegenerateGradient",
    "FedSpsError",
    "InsufficientData",
    "LowerBoundViolated",
    "NumericalDivergence",
    "OptimumNotFound",
    "ParseError",
    "PartitionInfeasible",
    "__version__",
]
