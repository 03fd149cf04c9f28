"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: ``ConfigError``/``DataError``/``DimensionError``
exit with 2, ``NumericalError`` with 3.
"""


class IconPeftError(Exception):
    """Base class for all library errors."""


class ConfigError(IconPeftError, ValueError):
    """Invalid configuration value or combination of values."""


class DimensionError(IconPeftError, ValueError):
    """Operand shapes are incompatible."""


class DataError(IconPeftError, ValueError):
    """Malformed dataset file or out-of-range label."""


class ValidationError(IconPeftError, ValueError):
    """Input violates a documented precondition (e.g. non-stochastic matrix)."""


class UsageError(IconPeftError, RuntimeError):
    """API misuse, such as calling backward on a non-scalar."""


class NumericalError(IconPeftError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
