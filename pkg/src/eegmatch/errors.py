"""Exception types shared across the package."""


class EegMatchError(Exception):
    """Base class for all package errors."""


class FormatError(EegMatchError):
    """A file does not conform to its documented on-disk format."""


class ValidationError(EegMatchError):
    """Data violates a documented invariant."""


class ConfigError(EegMatchError):
    """A configuration value is missing, malformed, or inconsistent."""


class NonFiniteError(EegMatchError):
    """A numeric computation produced NaN or Inf."""
