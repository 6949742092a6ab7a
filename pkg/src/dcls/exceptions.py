"""Exception types raised across the package."""


class DclsError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(DclsError, ValueError):
    pass


class NonFiniteError(DclsError, ValueError):
    pass


class MissingCacheError(DclsError, RuntimeError):
    pass


class GroupDivisibilityError(DclsError, ValueError):
    pass


class DataFormatError(DclsError, ValueError):
    """Malformed, truncated or inconsistent dataset file."""


class ConfigError(DclsError, ValueError):
    pass


class CheckpointError(DclsError, ValueError):
    pass
