"""Exception hierarchy.

Every error maps onto one of the CLI exit codes: configuration and
numerical errors exit with status 2.
"""

from __future__ import annotations


class SmpKitError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SmpKitError, ValueError):
    """Invalid generator matrix, problem specification or run config."""


class DomainError(SmpKitError, ValueError):
    """Argument outside the domain of an operation."""


class MembershipError(DomainError):
    """Point does not belong to the constraint set."""


class AdmissibilityError(SmpKitError, ValueError):
    """Control value outside the constraint box."""


class ParameterError(ConfigurationError):
    """Example parameters violate a stated assumption."""


class NumericalError(SmpKitError, ArithmeticError):
    """Non-finite values or blow-up in a numerical routine."""


class BlowUpError(NumericalError):
    """Forward simulation left the configured bound on a path."""

    def __init__(self, message: str, path: int, step: int):
        super().__init__(message)
        self.path = path
        self.step = step


class BasisError(NumericalError):
    """Regression design matrix is rank deficient."""


class ConvergenceError(NumericalError):
    """Picard iteration failed to contract."""


class ShapeError(SmpKitError, ValueError):
    """Arrays from different simulations do not line up."""
