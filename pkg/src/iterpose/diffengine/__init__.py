"""Minimal reverse-mode autodiff engine on numpy arrays."""

from . import ops
from .layers import BatchNorm2d, Conv2d, Linear, he_uniform
from .optim import SGD, Adam
from .tensor import Tensor, as_tensor, backward, no_grad, param

__all__ = [
    "Tensor", "as_tensor", "backward", "no_grad", "param", "ops",
    "Conv2d", "Linear", "BatchNorm2d", "he_uniform", "Adam", "SGD",
]
