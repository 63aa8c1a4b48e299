"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""


class DataError(ValueError):
    """A record or file is incomplete or inconsistent."""
