"""Exception types shared by every mixseg module.

The CLI maps each class to a process exit code (see ``cli.app.EXIT_CODES``).
"""


class MixSegError(Exception):
    pass


class ConfigurationError(MixSegError, ValueError):
    """Invalid spec, config key or hyperparameter."""


class DimensionError(MixSegError, ValueError):
    pass


class DataError(MixSegError, ValueError):
    """Unreadable, unpaired or malformed input data."""


class NumericError(MixSegError, ArithmeticError):
    """NaN/Inf values or failed numeric checks."""


class CheckpointError(MixSegError):
    """Malformed, truncated or mismatched checkpoint file."""
