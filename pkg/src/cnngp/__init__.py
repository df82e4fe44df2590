"""Gaussian-process kernels of infinitely wide convolutional and residual networks."""

from .architecture import (
    ArchitectureSpec,
    FanInMode,
    Hyperparameters,
    KernelConfig,
    LayerSpec,
    Nonlinearity,
    Padding,
    ReluPrefactor,
    load_config,
)
from .errors import CnnGpError, ConfigError, DataError, NumericError
from .kernel import KernelTriple, convnet_kernel, gram_matrix

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "CnnGpError", "ConfigError", "DataError", "FanInMode",
    "Hyperparameters", "KernelConfig", "KernelTriple", "LayerSpec", "Nonlinearity",
    "NumericError", "Padding", "ReluPrefactor", "convnet_kernel", "gram_matrix", "load_config",
]
