"""Numeric core: tensors with reverse-mode gradients, layers, optimizer."""

from .nn import ParamSet, gelu, layernorm, linear, mlp_forward, softmax
from .optim import OneCycleSchedule, adamw_step, clip_grad_norm, onecycle_lr
from .tensor import (
    Tensor,
    as_tensor,
    check_finite,
    concat,
    exp,
    log,
    matmul,
    no_grad,
    sqrt,
    tanh,
)

__all__ = [
    "ParamSet",
    "OneCycleSchedule",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "check_finite",
    "clip_grad_norm",
    "concat",
    "exp",
    "gelu",
    "layernorm",
    "linear",
    "log",
    "matmul",
    "mlp_forward",
    "no_grad",
    "onecycle_lr",
    "softmax",
    "sqrt",
    "tanh",
]
