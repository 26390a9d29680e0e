"""Minimal reverse-mode differentiation over numpy arrays."""

from .checkpoint import CheckpointError, load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .module import BatchStatNorm, Linear, Module, named_rng, set_update_stats
from .optim import AdamState, adam_step, lr_schedule
from .tensor import (ShapeError, Tape, Tensor, add, as_tensor, backward, batch_stat_norm,
                     concat, div, exp, gather_rows, matmul, mean, mul, neg, pow, relu,
                     reshape, scatter_add_rows, sigmoid, slice_, softmax_lastdim, spmm,
                     sqrt, sub, sum, transpose)

__all__ = [
    "AdamState", "BatchStatNorm", "CheckpointError", "GradCheckReport", "Linear", "Module",
    "ShapeError", "Tape", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "batch_stat_norm", "concat", "div", "exp", "gather_rows", "grad_check", "load_params",
    "lr_schedule", "matmul", "mean", "mul", "neg", "pow", "relu", "reshape", "save_params",
    "named_rng", "scatter_add_rows", "set_update_stats", "sigmoid", "slice_", "softmax_lastdim",
    "spmm", "sqrt", "sub", "sum",
    "transpose",
]
