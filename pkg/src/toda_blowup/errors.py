"""Exception types raised across the package."""


class TodaLabError(Exception):
    """Base class for all package errors."""


class MeshError(TodaLabError, ValueError):
    """Invalid domain description or mesh data."""


class OutsideDomainError(TodaLabError, ValueError):
    """A query point lies outside the meshed region."""


class ConfigurationError(TodaLabError, ValueError):
    """Bad experiment configuration or invalid concentration points."""


class RegimeError(TodaLabError, ValueError):
    """Parameters outside the regime where the solver is well posed."""


class NonConvergenceError(TodaLabError, RuntimeError):
    """An iterative solver failed; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class EscapedConfigurationError(TodaLabError, RuntimeError):
    """An optimisation iterate left the admissible configuration set."""

    def __init__(self, message, points=None, direction=None):
        super().__init__(message)
        self.points = points
        self.direction = direction


class InsufficientDataError(TodaLabError, ValueError):
    """Too few samples to fit a scaling law."""


class BranchAbortError(TodaLabError, RuntimeError):
    """Continuation failed at its first sample."""
