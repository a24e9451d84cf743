"""Hierarchical region-attention network on a numpy reverse-mode tape."""

from .autodiff import Tape, Tensor, param
from .errors import (CheckpointError, ConfigError, ContractError,
                     DimensionError, NumericError, TapeError)

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "param",
    "CheckpointError", "ConfigError", "ContractError", "DimensionError",
    "NumericError", "TapeError",
    "__version__",
]
