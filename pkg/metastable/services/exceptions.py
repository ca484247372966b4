"""
Custom exception classes for service errors.

Every error carries the process exit code the CLI returns for it:
1 for usage/configuration problems, 2 for numerical failures and
3 for acceptance-threshold failures.
"""
from typing import Optional


class ServiceError(Exception):
    """Base exception class for service errors."""
    exit_code: int = 2


class ConfigError(ServiceError):
    """Raised for configuration-related errors (bad JSON, invalid fields, guards)."""
    exit_code = 1


class ModelError(ServiceError):
    """Raised when a potential/damping pair does not define a valid model."""
    exit_code = 1


class QuadratureError(ServiceError):
    """Raised when an adaptive quadrature does not reach its tolerance."""

    def __init__(self, message: str, achieved: Optional[float] = None):
        super().__init__(message)
        self.achieved = achieved


class ProfileDomainError(ServiceError):
    """Raised when a steady profile is requested outside its admissible range."""
    pass


class CalibrationError(ServiceError):
    """Raised when the asymptotic constants cannot be extrapolated reliably."""
    pass


class LayerDomainError(ServiceError):
    """Raised when layer positions leave the admissible set of spacings."""
    pass


class DegenerateConfigurationError(ServiceError):
    """Raised when the tangent matrix D(h) loses diagonal dominance."""
    pass


class ProjectionError(ServiceError):
    """Raised when the Newton projection onto the manifold fails."""
    pass


class BlowUpError(ServiceError):
    """Raised when a time integration produces non-finite values."""

    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class ResampleError(ServiceError):
    """Raised when an observable series is not sampled on a regular time grid."""
    pass


class FitError(ServiceError):
    """Raised when a regression has too few usable points."""
    pass


class EquilibriumError(ServiceError):
    """Raised when no equilibrium configuration exists for the requested N and ε."""
    pass


class StructuralError(ServiceError):
    """Raised when the Hessian of the reduced energy is not negative definite."""
    pass


class AcceptanceError(ServiceError):
    """Raised when a plan finishes but misses a declared acceptance threshold."""
    exit_code = 3
