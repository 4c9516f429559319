"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
IO problems exit 3 and numerical divergence exits 4.
"""


class RelsegError(Exception):
    """Base class for all package errors."""


class DimensionError(RelsegError, ValueError):
    """Tensor or mask shapes are incompatible."""


class ConfigError(RelsegError, ValueError):
    """A configuration value is invalid."""


class UsageError(RelsegError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class ValidationError(RelsegError, ValueError):
    """Input data is outside its valid domain."""


class UndefinedCorrelationError(RelsegError, ValueError):
    """Correlation requested on a constant series."""


class DivergenceError(RelsegError, ArithmeticError):
    """Training produced a non-finite loss."""


class DatasetIOError(RelsegError, OSError):
    """A file is missing or malformed; the message names the path."""
