"""Exception types shared across the package."""


class LightDistillError(Exception):
    """Base class for all runtime errors raised by this package."""


class DataValidationError(LightDistillError, ValueError):
    """Input data violates an invariant (non-finite pixels, bad ranges, shape mismatch)."""


class FileFormatError(LightDistillError, ValueError):
    """A file on disk is malformed (bad header, truncated payload, wrong dimensions)."""


class ConfigError(LightDistillError, ValueError):
    """A configuration file has unknown keys or invalid values."""


class OracleError(LightDistillError):
    """The prior oracle failed to produce a usable response."""


class OracleTimeout(OracleError):
    """No response appeared in the exchange directory within the deadline."""
