"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CauvisError(Exception):
    """Base class for all errors raised by cauvis_lab."""

    exit_code = 1


class ShapeError(CauvisError, ValueError):
    """Operand dimensions do not agree."""

    exit_code = 3


class ConfigError(CauvisError, ValueError):
    """A setting is missing or outside its allowed range."""

    exit_code = 3


class FormatError(CauvisError, ValueError):
    """A file on disk is corrupt or not in the expected format."""

    exit_code = 2


class UnknownStateError(CauvisError, KeyError):
    """A state index is not part of a discrete model."""

    exit_code = 3


class NumericError(CauvisError, ArithmeticError):
    """Non-finite values or a numerical kernel that failed to converge."""

    exit_code = 4

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class GraphError(NumericError):
    """Unsupported operation or malformed tape."""


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f'{message} (epoch {epoch})')
        self.epoch = epoch
