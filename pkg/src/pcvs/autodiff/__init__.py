"""Minimal reverse-mode automatic differentiation over dense numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .nn import MLP, Conv2d, Linear, MlpSpec, Module, ResBlock, ResBlockStack
from .optim import AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    find_nonfinite,
    get_default_dtype,
    make_node,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "AdamState", "Conv2d", "Linear", "MLP", "MlpSpec", "Module", "ResBlock",
    "ResBlockStack", "ShapeError", "Tensor", "adam_step", "as_tensor", "backward",
    "default_dtype", "find_nonfinite", "get_default_dtype", "grad_check",
    "make_node", "no_grad", "ops", "set_default_dtype",
]
