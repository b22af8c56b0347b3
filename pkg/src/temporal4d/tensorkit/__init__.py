"""Minimal numpy-backed tensor engine with reverse-mode differentiation."""
from .gradcheck import grad_check
from .optim import Adam
from .tensor import (
    DEFAULT_DTYPE,
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    clamp,
    concat,
    create,
    div,
    exp,
    grad,
    index,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    randn,
    reshape,
    scatter_add,
    sigmoid,
    silu,
    softmax_lastdim,
    sqrt,
    stack,
    sub,
    sum_,
    swap_last,
    take,
    transpose,
    zeros,
)

__all__ = [
    "Adam", "ContractError", "DEFAULT_DTYPE", "ShapeError", "Tape", "Tensor",
    "abs_", "add", "as_tensor", "backward", "clamp", "concat", "create", "div",
    "exp", "grad", "grad_check", "index", "layer_norm", "log", "matmul", "mean",
    "mul", "neg", "no_grad", "ones", "randn", "reshape", "scatter_add",
    "sigmoid", "silu", "softmax_lastdim", "sqrt", "stack", "sub", "sum_",
    "swap_last", "take", "transpose", "zeros",
]
