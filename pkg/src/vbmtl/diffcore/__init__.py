"""Differentiable arrays, parameter containers and the optimizer."""
from .nn import GROUPS, LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter
from .optim import AdamW, MissingGradientError
from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    concat,
    conv1d,
    div,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scaled_dot_product_attention,
    softmax,
    sqrt,
    sub,
    sum_,
    transpose,
    variance,
)

__all__ = [
    "GROUPS", "AdamW", "LayerNorm", "Linear", "MLP", "MissingGradientError", "Module",
    "MultiHeadAttention", "Parameter", "ShapeError", "Tensor", "abs_", "add", "as_tensor",
    "concat", "conv1d", "div", "exp", "getitem", "is_grad_enabled", "layer_norm", "log",
    "log_softmax", "matmul", "maximum", "mean", "mul", "no_grad", "power", "relu", "reshape",
    "scaled_dot_product_attention", "softmax", "sqrt", "sub", "sum_", "transpose", "variance",
]
