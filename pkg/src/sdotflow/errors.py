"""Exception hierarchy shared by every module."""


class SdotFlowError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SdotFlowError, ValueError):
    """Bad input: wrong shapes, out-of-range values, malformed files."""


class FormatError(ValidationError):
    """A binary or text file does not match its declared layout.

    ``offset`` is the byte (or line) position where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(SdotFlowError, ArithmeticError):
    """A computation produced non-finite values and was aborted."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
