"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class NNCertifyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NNCertifyError, ValueError):
    """Bad arguments or configuration (CLI exit code 2)."""


class DataError(NNCertifyError):
    """Problems with input data files (CLI exit code 3)."""


class DataFormatError(DataError, ValueError):
    """Magic number, record size or header mismatch."""


class ConsistencyError(DataError, ValueError):
    """Files that parse individually but disagree with each other."""


class TruncatedFileError(DataError, OSError):
    """File ended before the header said it would."""


class ValidationError(NNCertifyError, ValueError):
    """Non-finite values or shape mismatches in numerical inputs."""


class NumericalError(NNCertifyError, ArithmeticError):
    """Numerical failure (CLI exit code 4)."""


class SolverError(NumericalError):
    """Iterative solver failed to converge.

    ``upper_bound`` carries the best feasible objective value found so far
    (``inf`` when none was found).
    """

    def __init__(self, message, upper_bound=float("inf"), witness=None):
        super().__init__(message)
        self.upper_bound = upper_bound
        self.witness = witness


class TrainingError(NumericalError):
    """Training diverged; ``checkpoint`` holds the last finite model."""

    def __init__(self, message, checkpoint=None, diagnostics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}


class UsageError(NNCertifyError, RuntimeError):
    """API used in an unsupported way (e.g. a reused tape)."""
