"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigError(ValueError):
    """A configuration is invalid or incompatible with a checkpoint."""


class NumericError(ArithmeticError):
    """A numeric failure (NaN/Inf loss, divergence) was detected."""
