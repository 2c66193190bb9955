"""Exception types shared across the package."""


class SparseVQError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(SparseVQError, ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(SparseVQError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InsufficientDataError(ConfigurationError):
    """A dataset is too short to produce the requested windows."""


class DataLoadError(SparseVQError, ValueError):
    """A file could not be parsed into a series."""


class NumericError(SparseVQError, ArithmeticError):
    """A numerical operation failed (singular system, zero norm, non-finite)."""


class UsageError(SparseVQError, RuntimeError):
    """An operation was called in an invalid order or state."""
