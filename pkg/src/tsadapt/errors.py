"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid; no work was started."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
