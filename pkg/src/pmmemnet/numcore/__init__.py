"""Minimal float64 autodiff substrate: tensors, ops, Adam, gradient checks."""

from .gradcheck import grad_check
from .params import ParamStore, adam_step, xavier_uniform
from .tensor import (
    RunningStats,
    Tensor,
    absval,
    add,
    batchnorm_forward,
    exp,
    gru_cell,
    matmul,
    mul,
    no_grad,
    powc,
    relu,
    reshape,
    set_finite_checks,
    sigmoid,
    softmax,
    stack,
    swapaxes,
    take_rows,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "RunningStats",
    "Tensor",
    "ParamStore",
    "absval",
    "adam_step",
    "add",
    "batchnorm_forward",
    "exp",
    "grad_check",
    "gru_cell",
    "matmul",
    "mul",
    "no_grad",
    "powc",
    "relu",
    "reshape",
    "set_finite_checks",
    "sigmoid",
    "softmax",
    "stack",
    "swapaxes",
    "take_rows",
    "tanh",
    "tmean",
    "tsum",
    "xavier_uniform",
]
