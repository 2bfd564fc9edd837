"""Colour-guided depth super-resolution with symmetric-uncertainty feature transmission."""

from .network import NetworkConfig, SUFTNet, build_model, init_params
from .training import TrainConfig

__all__ = ["NetworkConfig", "SUFTNet", "TrainConfig", "build_model", "init_params"]
__version__ = "0.1.0"
