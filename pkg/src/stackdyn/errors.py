"""Exception hierarchy."""

from __future__ import annotations


class StackdynError(Exception):
    """Base class for all package errors."""


class ContractError(StackdynError, ValueError):
    """An input violates a documented precondition (shape, range, finiteness)."""


class EvaluationError(StackdynError):
    """A cost or derivative evaluated to a non-finite value."""


class NumericalError(StackdynError):
    """A numerical routine failed; ``partial`` carries whatever was computed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class IndefiniteOperatorError(NumericalError):
    """Conjugate gradients hit non-positive curvature."""


class SingularFollowerHessianError(NumericalError):
    """The follower Hessian (plus regularization) could not be inverted."""

    def __init__(self, message, residual=float("nan"), partial=None):
        super().__init__(message, partial)
        self.residual = residual


class SizeError(StackdynError, ValueError):
    """Dense materialization requested above the configured cap."""


class FollowerNonConvergenceError(NumericalError):
    """The best-response inner loop did not reach its tolerance."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class PreconditionError(StackdynError):
    """A classification gate failed; ``gate`` names it."""

    def __init__(self, message, gate=""):
        super().__init__(message)
        self.gate = gate


class ConditioningError(StackdynError):
    """No Monte-Carlo replica satisfied the conditioning event."""


class ConfigError(StackdynError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=""):
        super().__init__(message)
        self.field = field
