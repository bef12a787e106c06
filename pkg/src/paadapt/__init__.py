"""Desk-scale promptable segmentation with a detail-enhancing prompt adapter
and Gumbel top-k hard point mining."""

from .model import ModelConfig, PaSam
from .tensor import Tensor, grad_check
from .train import TrainConfig

__all__ = ["ModelConfig", "PaSam", "Tensor", "TrainConfig", "grad_check"]
__version__ = "0.1.0"
