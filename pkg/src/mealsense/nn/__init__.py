"""Numeric core: tensors, reverse-mode differentiation, layers, Adam, checkpoints."""

from . import functional
from .checkpoint import Checkpoint
from .gradcheck import grad_check
from .layers import BatchNorm1d, Conv1d, ConvTranspose1d, LayerNorm, Linear, Module, Parameter
from .optim import adam_step
from .tensor import Tensor, concat, matmul, no_grad, tensor

__all__ = [
    "BatchNorm1d", "Checkpoint", "Conv1d", "ConvTranspose1d", "LayerNorm", "Linear",
    "Module", "Parameter", "Tensor", "adam_step", "concat", "functional", "grad_check",
    "matmul", "no_grad", "tensor",
]
