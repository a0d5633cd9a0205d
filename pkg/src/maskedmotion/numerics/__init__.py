"""Deterministic tensor arithmetic with reverse-mode differentiation."""

from .optim import Adam
from .rng import ALGORITHM, Rng
from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    add,
    attention,
    backward,
    concat,
    conv1d,
    conv1d_transpose,
    cross_entropy,
    dropout,
    embedding,
    grad_check,
    layer_norm,
    matmul,
    mul,
    narrow,
    no_grad,
    relu,
    reshape,
    softmax,
    stop_gradient,
    sub,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "ALGORITHM",
    "Adam",
    "NumericsError",
    "Rng",
    "ShapeError",
    "Tensor",
    "add",
    "attention",
    "backward",
    "concat",
    "conv1d",
    "conv1d_transpose",
    "cross_entropy",
    "dropout",
    "embedding",
    "grad_check",
    "layer_norm",
    "matmul",
    "mul",
    "narrow",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "stop_gradient",
    "sub",
    "tmean",
    "transpose",
    "tsum",
]
