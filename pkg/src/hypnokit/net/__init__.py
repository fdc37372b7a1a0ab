"""Autodiff core, U-Net stager, optimiser, training and checkpoints."""

from .kernels import backend
from .model import ModelConfig, USleep, forward, params
from .tensor import Tensor, masked_cross_entropy, no_grad

__all__ = [
    "ModelConfig",
    "Tensor",
    "USleep",
    "backend",
    "forward",
    "masked_cross_entropy",
    "no_grad",
    "params",
]
