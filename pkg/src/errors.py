"""
Exception hierarchy for the homogenization workbench.
Every error raised by the solvers derives from HomogenizationError so the CLI
can map it onto a process exit code.
"""

from typing import Dict, List, Optional, Sequence


class HomogenizationError(Exception):
    """Base class for all workbench errors."""

    exit_code = 3


class InvalidArgumentError(HomogenizationError, ValueError):
    """Raised when an argument is non-finite, mismatched or out of its domain."""

    exit_code = 2


class ConfigurationError(HomogenizationError):
    """Raised when a model or experiment is missing a required descriptor."""

    exit_code = 2


class SchemaError(ConfigurationError):
    """Raised when an experiment document does not match the published schema.

    Args:
        message: Human readable description
        paths: JSON paths (``$.a.b[0]``) of the offending keys
    """

    def __init__(self, message: str, paths: Optional[Sequence[str]] = None):
        self.paths = list(paths or [])
        if self.paths:
            message = f"{message} (at {', '.join(self.paths)})"
        super().__init__(message)


class RangeError(HomogenizationError, ValueError):
    """Raised when a query falls outside a tabulated region."""

    exit_code = 2


class ConvergenceError(HomogenizationError):
    """Raised when a nonlinear iteration or periodic sweep fails to converge.

    Args:
        message: Human readable description
        history: Residual (or periodicity gap) history up to the failure
        step: Time step index, when the failure happened inside a time march
    """

    def __init__(self, message: str, history: Optional[Sequence[float]] = None,
                 step: Optional[int] = None):
        self.history = [float(h) for h in (history or [])]
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        if self.history:
            message = f"{message} (last residual {self.history[-1]:.3e})"
        super().__init__(message)

    @property
    def last_residual(self) -> Optional[float]:
        return self.history[-1] if self.history else None


class ResourceError(HomogenizationError):
    """Raised when the cell-solution cache would exceed its budget."""

    def __init__(self, message: str, distinct_values: int):
        self.distinct_values = distinct_values
        super().__init__(f"{message} ({distinct_values} distinct xi values)")


class UnavailableError(HomogenizationError):
    """Raised on a cache miss when solving on demand is disabled."""


class StudyError(HomogenizationError):
    """Raised when a convergence study aborts.

    Args:
        stage: Name of the failing stage (e.g. ``fine_solve``)
        cause: The underlying exception
        rows: Report rows completed before the failure
    """

    def __init__(self, stage: str, cause: Exception, rows: Optional[List[Dict]] = None):
        self.stage = stage
        self.cause = cause
        self.rows = list(rows or [])
        self.exit_code = getattr(cause, 'exit_code', 4 if isinstance(cause, OSError) else 3)
        super().__init__(f"study failed during '{stage}': {cause}")


def exit_code_for(error: BaseException) -> int:
    """Map an exception onto the CLI exit code convention."""
    if isinstance(error, HomogenizationError):
        return error.exit_code
    if isinstance(error, OSError):
        return 4
    return 3
