"""Exception hierarchy shared across the package."""


class DualDiffError(Exception):
    """Base class for every error raised by dualdiff."""


class ShapeError(DualDiffError, ValueError):
    pass


class DomainError(DualDiffError, ValueError):
    """An elementwise op received an argument outside its domain."""


class NumericOverflowError(DualDiffError, ArithmeticError):
    """An op produced a NaN or an infinity."""


class TapeError(DualDiffError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused graph, ...)."""


class ConfigError(DualDiffError, ValueError):
    pass


class DegenerateFieldError(DualDiffError, ValueError):
    """The log-SNR polynomial cannot be normalised (f(M) <= 0)."""


class MonotonicityError(DualDiffError, ValueError):
    """A schedule failed to have a strictly decreasing SNR."""


class DataError(DualDiffError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class CheckpointError(DualDiffError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class TrainingDivergenceError(DualDiffError, RuntimeError):
    """Raised when a loss turns non-finite; carries a parameter snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
