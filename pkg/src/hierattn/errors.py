"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes or axes of an operation's arguments do not line up."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (double backward, mixed tapes, ...)."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


class DatasetError(IOError):
    """Malformed or missing dataset files."""
