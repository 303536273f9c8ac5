"""
Exception hierarchy for simcache-lab
Library operations raise these; the CLI and HTTP layers turn them into structured errors
"""
from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for every error raised by the laboratory"""

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        payload = {'error': type(self).__name__, 'message': self.message}
        payload.update(self.details)
        return payload


class ValidationError(LabError):
    """Invalid configuration or out-of-range input"""
    pass


class DimensionMismatchError(LabError):
    """Embeddings of a catalog do not share one dimension, or a 2D-only operation got another dimension"""
    pass


class NoRootError(LabError):
    """The capacity equation has no finite root"""
    pass


class ModelError(LabError):
    """Closed-form model quantities that must agree do not"""
    pass


class SolverError(LabError):
    """Fixed point iteration aborted"""

    def __init__(self, message: str, iteration: Optional[int] = None, **details: Any):
        super().__init__(message, iteration=iteration, **details)
        self.iteration = iteration


class BudgetExceededError(LabError):
    """An exhaustive computation was refused because the instance is too large"""
    pass


class SingularJacobianError(LabError):
    """Sum of timer partials vanished, the implicit t_C gradient is undefined"""
    pass


class PowerIterationError(LabError):
    """Power iteration did not reach the requested tolerance"""

    def __init__(self, message: str, last_estimate: float, **details: Any):
        super().__init__(message, last_estimate=last_estimate, **details)
        self.last_estimate = last_estimate


class UnknownItemError(LabError):
    """A trace references an id outside the catalog"""
    pass


class MissingTimestampsError(LabError):
    """A continuous-time simulation was given a trace without timestamps"""
    pass


class ConfigMismatchError(LabError):
    """Requested methods are not compatible with the experiment configuration"""
    pass
