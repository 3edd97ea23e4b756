"""Exception taxonomy shared across the package.

Every module raises one of these instead of bare ValueError/RuntimeError so the
CLI can map failure categories onto distinct exit codes and the HTTP service
onto status codes.
"""


class SoctwinError(Exception):
    """Base class for all package errors."""


class ShapeError(SoctwinError):
    """Array dimensions or dtypes incompatible with the operation."""


class ValidationError(SoctwinError):
    """A domain object violates its invariants (bad dose, unsorted events...)."""


class ConfigError(SoctwinError):
    """A configuration value is out of its legal range."""


class SolverError(SoctwinError):
    """Iterative solver failed to converge within its budget."""

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class FormatError(SoctwinError):
    """A file does not match the on-disk format contract."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class StateError(SoctwinError):
    """Operation invalid for the current state (e.g. stepping backwards in time)."""
