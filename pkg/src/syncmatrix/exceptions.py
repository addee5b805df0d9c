"""Exception hierarchy shared by every module of the package."""


class SyncMatrixError(Exception):
    """Base class for all package errors."""


class DimensionError(SyncMatrixError, ValueError):
    """Shapes of the operands are incompatible."""


class DegenerateInputError(SyncMatrixError, ValueError):
    """Input has no direction (zero vector) or is otherwise unusable."""


class EmptyInputError(SyncMatrixError, ValueError):
    pass


class InsufficientLengthError(SyncMatrixError, ValueError):
    """Stream or matrix too short for the requested operation."""


class NumericError(SyncMatrixError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingError(NumericError):
    """Training diverged (non-finite loss)."""


class ConfigError(SyncMatrixError, ValueError):
    pass


class CheckpointError(SyncMatrixError, IOError):
    pass
