"""Exception types shared across the package."""


class GFPError(Exception):
    """Base class for package errors."""


class ValidationError(GFPError, ValueError):
    """Bad shapes, configs or arguments."""


class FormatError(GFPError):
    """A dataset or checkpoint file does not match its binary layout."""


class NumericError(GFPError, FloatingPointError):
    """Non-finite values appeared during a forward or optimizer step."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path


class StateError(GFPError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""
