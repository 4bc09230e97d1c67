"""Exception hierarchy.

Input problems (bad files, bad arguments) and numerical failures are kept
distinct so the CLI can map them to different exit codes.
"""


class GevfieldError(Exception):
    """Base class for all package errors."""


class InputError(GevfieldError, ValueError):
    """Invalid user input: bad parameter values, malformed files, bad options."""


class IngestError(InputError):
    """Malformed data file; carries file/line context where available."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}: "
            if line is not None:
                prefix = f"{path}:{line}: "
        super().__init__(prefix + message)


class NumericalError(GevfieldError, RuntimeError):
    """Numerical failure: non-PD covariance, diverged optimizer, singular Hessian."""


class FactorizationError(NumericalError):
    """Cholesky factorization failed even after the jitter retry."""


class FitError(NumericalError):
    """Model fitting failed; the partial trace is attached when available."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)
