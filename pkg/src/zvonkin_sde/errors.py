"""Exception hierarchy shared by every module."""


class ZvonkinError(Exception):
    """Base class for all library errors."""


class ParameterError(ZvonkinError, ValueError):
    """A parameter lies outside the documented domain."""


class AssumptionViolation(ZvonkinError):
    """A coefficient field fails an assumption audit at a sampled point."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ResolutionError(ZvonkinError):
    """The grid is too coarse for the requested operation."""


class SolverError(ZvonkinError):
    """A linear or iterative solve did not converge."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else []


class StabilityError(SolverError):
    """Time stepping blew up."""


class RegularityError(ZvonkinError):
    """The Zvonkin map is not safely invertible (gradient too large)."""


class ConvergenceError(ZvonkinError):
    """A fixed-point inversion hit its iteration cap."""


class ConfigError(ZvonkinError, ValueError):
    """A scenario config violates the schema."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DegenerateEstimateError(ZvonkinError):
    """Every sample was excluded, so no estimate exists."""
