"""Amortized clustering with set-attention networks.

A trained network extracts one cluster per forward pass (cluster parameters
plus per-point membership probabilities); iterating until every point is
assigned clusters a whole dataset without any per-dataset optimization.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, use_dtype
from .errors import ConfigError, ContractError, NumericError

__all__ = ["Tensor", "Tape", "use_dtype", "ConfigError", "ContractError", "NumericError", "__version__"]
