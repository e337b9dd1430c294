"""Exception types shared across the package."""


class BGHNetError(Exception):
    """Base class for all package errors."""


class ConfigError(BGHNetError, ValueError):
    """Invalid layer or run configuration (shapes, groups, windows...)."""


class InputError(BGHNetError, ValueError):
    """Data handed to an operation does not satisfy its preconditions."""


class NumericError(BGHNetError, RuntimeError):
    """A computation produced a non-finite value."""
