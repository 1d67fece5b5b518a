"""Exception types shared across the package.

The command line maps these to exit codes: ConfigError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericalError(ArithmeticError):
    """A non-finite value (NaN or Inf) appeared where finite math is required."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DataError(ValueError):
    """A dataset file is missing, truncated, or has a bad magic number."""
