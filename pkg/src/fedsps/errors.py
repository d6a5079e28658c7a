"""Exception hierarchy shared by every module."""


class FedSpsError(Exception):
    pass


class LowerBoundViolated(FedSpsError, ValueError):
    """A stochastic loss fell below the configured lower bound."""


class DegenerateGradient(FedSpsError, ValueError):
    """Zero gradient reported at a point with a positive loss gap."""


class ParseError(FedSpsError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientData(FedSpsError, ValueError):
    pass


class PartitionInfeasible(FedSpsError, ValueError):
    pass


class OptimumNotFound(FedSpsError, RuntimeError):
    pass


class CheckSkipped(FedSpsError):
    """A verification check lacks the reference quantities it needs."""


class NumericalDivergence(FedSpsError, FloatingPointError):
    """Training produced non-finite parameters or an exploding loss.

    ``history`` holds the partial trace recorded before the abort.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
