"""Exception types shared across the package."""


class PalpationError(Exception):
    """Base class for all package errors."""


class MeshError(PalpationError):
    """Malformed mesh data or a violated mesh invariant."""


class UvOffSurfaceError(PalpationError):
    """A UV query that does not land on any face of the atlas."""


class ConfigError(PalpationError):
    """Invalid configuration value."""


class DegenerateGeometryError(PalpationError):
    """Point configuration too degenerate to fit (collinear, too few points)."""


class RegistrationError(PalpationError):
    """Registration input or convergence failure."""


class ProbeParamError(PalpationError):
    """Probe parameters outside the admissible range."""


class BaselineError(PalpationError):
    """Baseline cannot be estimated from the record."""


class LineFitError(PalpationError):
    """RANSAC could not find a consistent linear trend."""


class IllConditionedKernelError(PalpationError):
    """Kernel matrix not positive definite (duplicate points, bad hyperparameters)."""


class SearchComplete(PalpationError):
    """Raised when every grid point has been classified."""

    def __init__(self, msg: str = "search complete"):
        super().__init__(msg)


class BudgetExhausted(PalpationError):
    """Raised when a step is requested past the probe budget."""

    def __init__(self, msg: str = "budget exhausted"):
        super().__init__(msg)


class SessionNotFound(PalpationError):
    """Unknown session id."""


class InvalidSessionState(PalpationError):
    """Operation not allowed in the session's current status."""


class ArchiveError(PalpationError):
    """Exported session archive failed validation on import."""
