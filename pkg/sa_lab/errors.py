"""Exception hierarchy shared by every lab module."""
from __future__ import annotations


class LabError(Exception):
    """Base class; the experiment runner catches this per analysis."""


class ConfigurationError(LabError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ErgodicityError(LabError):
    pass


class NumericalError(LabError):
    pass


class ConvergenceError(LabError):
    def __init__(self, message: str, last_residual: float, iterations: int):
        self.last_residual = last_residual
        self.iterations = iterations
        super().__init__(f"{message} (last residual {last_residual:.3e} after {iterations} iterations)")


class DivergenceError(LabError):
    def __init__(self, step: int, message: str = "non-finite or runaway iterate"):
        self.step = step
        super().__init__(f"step {step}: {message}")


class EmptyAccumulatorError(LabError):
    pass


class ReplicationError(LabError):
    pass


class EstimationError(LabError):
    pass


class DegenerateFitError(LabError):
    pass


class UnsupportedOperationError(LabError):
    pass
