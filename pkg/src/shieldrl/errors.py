"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An input has the wrong shape or dimension."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class ConfigurationError(RuntimeError):
    """A run was requested with missing or inconsistent configuration."""
