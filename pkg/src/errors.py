"""Error Types

Exceptions raised across the reconstruction toolkit. The CLI maps each family
to its own exit code.
"""

from typing import Optional


class DotError(Exception):
    """Base class for toolkit errors."""


class ConfigValidationError(DotError, ValueError):
    """Invalid run configuration; names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SolverError(DotError, RuntimeError):
    """Linear solver breakdown, non-convergence or singular system."""

    def __init__(self, message: str, iterations: int = 0,
                 residual: float = float('nan'), context: Optional[str] = None):
        self.iterations = iterations
        self.residual = residual
        self.context = context
        detail = f"{message} (iterations={iterations}, residual={residual:.3e})"
        if context:
            detail = f"{context}: {detail}"
        super().__init__(detail)


class BasisFormatError(DotError, ValueError):
    """Corrupt or mismatched binary container."""


class PhaseError(DotError, RuntimeError):
    """Failure inside one phase of the reconstruction pipeline."""

    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"[{phase}] {cause}")
