"""Exception hierarchy shared across the package."""


class DequantError(Exception):
    """Base class for all package errors."""


class DimensionError(DequantError, ValueError):
    pass


class NumericError(DequantError, ArithmeticError):
    pass


class DomainError(DequantError, ValueError):
    """A value lies outside the open set a map is defined on."""


class TrainingError(DequantError, RuntimeError):
    """Optimization diverged; carries the last finite parameters if known."""

    def __init__(self, message, last_good=None, offending=None):
        super().__init__(message)
        self.last_good = last_good
        self.offending = offending


class ConfigError(DequantError, ValueError):
    pass


class FormatError(DequantError, ValueError):
    """Malformed binary/text input (IDX, checkpoint, PGM)."""
