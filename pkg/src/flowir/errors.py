"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 2,
DataFormatError -> 3, NumericalError -> 4.
"""


class FlowirError(Exception):
    """Base class for all package errors."""


class UsageError(FlowirError):
    """Invalid arguments, configuration, or preconditions supplied by the caller."""


class DataFormatError(FlowirError):
    """Corrupt or incompatible on-disk data (tensor files, checkpoints, corpora)."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (at byte offset {offset})"
        super().__init__(detail)


class NumericalError(FlowirError):
    """Non-finite values or diverging optimization encountered mid-computation."""
