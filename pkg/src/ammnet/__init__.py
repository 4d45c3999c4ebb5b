"""Asymmetric RGB + DSM semantic segmentation on a small numpy autograd engine."""

from __future__ import annotations

from .errors import (
    AmmnetError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    GenerationError,
    GraphError,
    InvariantError,
    NumericError,
    VersioningError,
)
from .model import AMMNet, ModelConfig
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "AMMNet",
    "AmmnetError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "GenerationError",
    "GraphError",
    "InvariantError",
    "ModelConfig",
    "NumericError",
    "Tensor",
    "VersioningError",
    "no_grad",
    "precision",
]
