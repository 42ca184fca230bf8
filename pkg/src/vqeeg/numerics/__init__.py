"""Minimal dense-tensor arithmetic with reverse-mode gradients."""

from .tensor import Parameter, Tensor, as_tensor, backward, check_finite_grad
from .rng import Rng
from .fft import fft_pow2, rfft_amplitude
from .gradcheck import SgTape, grad_check
from . import ops
from .ops import (
    add,
    div,
    dropout,
    gather,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    reshape,
    softmax,
    softplus,
    square,
    stop_gradient,
    straight_through,
    sub,
    sum_,
    transpose,
)

__all__ = [
    "Parameter",
    "Rng",
    "SgTape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "check_finite_grad",
    "div",
    "dropout",
    "fft_pow2",
    "gather",
    "gelu",
    "grad_check",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "ops",
    "power",
    "reshape",
    "rfft_amplitude",
    "softmax",
    "softplus",
    "square",
    "stop_gradient",
    "straight_through",
    "sub",
    "sum_",
    "transpose",
]
