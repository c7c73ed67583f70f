"""Exception hierarchy shared by all pronext modules.

The CLI maps these onto stable exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3. Everything else is a plain bug and propagates.
"""


class ProNextError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ProNextError):
    """Invalid or inconsistent configuration (unknown key, bad variant, ...)."""


class DimensionError(ProNextError):
    """Tensor shapes incompatible with the requested operation."""


class InputError(ProNextError):
    """Well-shaped but semantically invalid input values."""


class DataError(ProNextError):
    """Dataset files missing, unreadable, or malformed."""


class ParseError(DataError):
    """Malformed text record; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(ProNextError):
    """NaN/Inf encountered, or a numeric check failed."""


class GraphError(ProNextError):
    """Misuse of the autodiff graph (e.g. backward called twice)."""
