"""Exception hierarchy shared by every soilwave module."""


class SoilwaveError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(SoilwaveError, ValueError):
    """An argument violates an operation's precondition."""


class ValidationError(SoilwaveError, ValueError):
    """A value is outside its allowed domain (range, finiteness)."""


class ParseError(ValidationError):
    """A CSV row could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DecodeError(ValidationError):
    """A newline-JSON uplink object could not be decoded."""


class StorageError(SoilwaveError, OSError):
    """Reading or writing a persisted file failed."""


class FormatError(SoilwaveError):
    """A persisted file has the wrong magic or an unsupported version."""


class DegenerateInputError(SoilwaveError, ValueError):
    """Input has zero variance / zero range where a spread is required."""


class AlignmentError(SoilwaveError):
    """Gateway series cannot be aligned onto a common time axis."""


class TrainingError(SoilwaveError):
    """Model training diverged."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class BudgetExceededError(SoilwaveError):
    """A sweep ran past its wall-clock budget before finishing every row."""

    def __init__(self, message, completed=0):
        self.completed = completed
        super().__init__(message)
