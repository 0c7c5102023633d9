"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad types, or out-of-range values."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during training or loss evaluation."""
