"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is inconsistent with the model or data."""


class DataError(ValueError):
    """Input data is malformed or missing."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class UsageError(ValueError):
    """Command line arguments are invalid."""
