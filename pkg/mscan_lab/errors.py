"""
Exception hierarchy for mscan_lab.

Every error raised on purpose by the package derives from MScanError and
carries the exit code the CLI reports for it.
"""

from typing import Optional


class MScanError(Exception):
    """Base class for all mscan_lab errors."""

    exit_code = 1

    @property
    def kind(self) -> str:
        """Snake-case class name used in machine-parsable error lines."""
        name = type(self).__name__
        out = []
        for i, ch in enumerate(name):
            if ch.isupper() and i > 0:
                out.append('_')
            out.append(ch.lower())
        return ''.join(out)


class ConfigError(MScanError):
    """Unknown configuration key or value of the wrong type."""

    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class MissingInputError(MScanError):
    """A dataset, checkpoint or other required input does not exist."""

    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class DataError(MScanError):
    """Malformed or unusable interaction data."""

    exit_code = 4

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(MScanError):
    """Base for failures inside the numeric core."""

    exit_code = 5


class ShapeError(NumericError):
    """Input shapes do not conform to a primitive's signature."""


class IndexOutOfRangeError(NumericError):
    """Embedding lookup index outside the table."""


class GradientError(NumericError):
    """Misuse of the tape or backward pass."""


class NonFiniteError(NumericError):
    """A loss or probability became NaN or infinite."""


class UndefinedMetricError(MScanError):
    """A metric is undefined for the given inputs (e.g. AUC with one class)."""

    exit_code = 6


class OutputError(MScanError):
    """A report or artifact could not be written."""

    exit_code = 7

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path
