"""Exception types shared across the package."""


class LoyalbenchError(Exception):
    """Base class for all package errors."""


class InvalidInput(LoyalbenchError):
    """An argument violates an operation's precondition."""


class InvalidConfig(LoyalbenchError):
    """A configuration, recipe, or stage combination is not runnable."""


class FormatError(LoyalbenchError):
    """A file (checkpoint, dataset, config) is malformed.

    ``offset`` carries a byte offset for binary files, ``line`` a line
    number for text files; either may be None.
    """

    def __init__(self, message, offset=None, line=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class StageFailure(LoyalbenchError):
    """A benchmark stage failed; the report is emitted partially."""


class UnstableTiming(UserWarning):
    """Timing measurements varied by more than 20% of their median."""
