"""Exception types raised across the package."""


class ChnsError(Exception):
    """Base class for all solver errors."""


class StaggeringError(ChnsError, ValueError):
    """An array does not have the staggering an operator expects."""


class OutOfBounds(ChnsError, ValueError):
    """A phase field left the open interval (-1, 1)."""


class DomainError(ChnsError, ValueError):
    """Argument outside the domain of a scalar kernel."""


class NonZeroMean(ChnsError, ValueError):
    """A right-hand side that must be mean-zero is not."""


class NoConvergence(ChnsError):
    """An iterative solver hit its iteration cap.

    The :class:`~chnsfh.linsolve.SolveReport` is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class Breakdown(NoConvergence):
    """Krylov breakdown that survived one restart."""


class LinearSolveFailure(ChnsError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NewtonFailure(ChnsError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or []


class OuterNoConvergence(ChnsError):
    def __init__(self, message, updates=None):
        super().__init__(message)
        self.updates = updates or []


class PositivityBreach(ChnsError):
    """Raised if an accepted state violates |phi| < 1 (should never happen)."""


class ConfigError(ChnsError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
