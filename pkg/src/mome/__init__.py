"""Mixture of vision and language experts on a numpy autograd engine."""

from .errors import ConfigError, ContractError, DataError, DimensionError, DivergenceError, TapeError
from .tensor import Tape, Tensor

__all__ = ["ConfigError", "ContractError", "DataError", "DimensionError", "DivergenceError", "TapeError", "Tape", "Tensor"]
__version__ = "0.1.0"
