"""Exception types shared across the toolkit.

The CLI maps each family to an exit code: usage errors exit 1, data errors
exit 2 and training aborts exit 3.
"""


class StTransferError(Exception):
    """Base class for all toolkit errors."""


class UsageError(StTransferError, ValueError):
    """An API was called in a way its contract forbids."""


class DimensionError(UsageError):
    """Tensor shapes do not agree."""


class InputError(StTransferError, ValueError):
    """Input data is invalid (too short, empty, unknown word, duplicate id...)."""


class ParseError(InputError):
    """A file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IncompatibleError(UsageError):
    """Two models or checkpoints cannot be combined."""


class TrainingAborted(StTransferError, RuntimeError):
    """Training stopped early, e.g. because the loss became NaN."""
