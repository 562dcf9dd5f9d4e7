"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or run configuration is invalid."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


class UsageError(ValueError):
    """An API was called outside its contract."""
