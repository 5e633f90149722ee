"""Reverse-mode differentiable tensor engine (numpy backed)."""

from .tensor import (DTYPE, EngineError, Parameter, Tensor, as_tensor, backward, compute_dtype, grad, input_gradient,
                     make_node, precision)
from .ops import (
    add, broadcast_to, concat, concat_channels, detach, div, l2_norm, mean, mean_all, mul, neg, relu,
    reshape, scale, sigmoid, sqrt, square, sub, sum, sum_to, take,
)
from .conv import conv3d, tconv3d
from .gradcheck import FDReport, fd_check

__all__ = [
    "DTYPE", "EngineError", "FDReport", "Parameter", "Tensor", "add", "as_tensor", "backward",
    "broadcast_to", "compute_dtype", "concat", "concat_channels", "conv3d", "detach", "div", "fd_check", "grad",
    "input_gradient", "l2_norm", "make_node", "mean", "mean_all", "mul", "neg", "precision", "relu", "reshape",
    "scale", "sigmoid", "sqrt", "square", "sub", "sum", "sum_to", "take", "tconv3d",
]
