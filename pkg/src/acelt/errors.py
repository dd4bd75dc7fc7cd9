"""Exception types shared across the package."""


class AceError(Exception):
    """Base class for all errors raised by acelt."""


class DimensionError(AceError, ValueError):
    """Array shapes or axes are incompatible with the requested operation."""


class ContractError(AceError, ValueError):
    """An input violates an operation precondition."""


class ConfigurationError(AceError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NonFiniteError(AceError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""
