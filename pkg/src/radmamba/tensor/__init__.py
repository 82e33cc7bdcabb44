"""Minimal dense-tensor core with reverse-mode differentiation."""

from .core import (
    SOFTPLUS_THRESHOLD,
    Precision,
    PrecisionError,
    ShapeError,
    TapeError,
    Tensor,
    TensorError,
    elementwise,
    exp,
    expm1,
    get_default_precision,
    is_grad_enabled,
    log,
    matmul,
    no_grad,
    ones,
    precision,
    set_default_precision,
    sigmoid,
    silu,
    softplus,
    sqrt,
    tensor,
    zeros,
)
from .conv import avg_pool1d, avg_pool2d, conv1d, conv2d, conv_output_size, max_pool1d, max_pool2d
from .serialize import FormatError, from_bytes, load, save, to_bytes

__all__ = [
    "SOFTPLUS_THRESHOLD",
    "Precision",
    "PrecisionError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "TensorError",
    "FormatError",
    "elementwise",
    "exp",
    "expm1",
    "get_default_precision",
    "is_grad_enabled",
    "log",
    "matmul",
    "no_grad",
    "ones",
    "precision",
    "set_default_precision",
    "sigmoid",
    "silu",
    "softplus",
    "sqrt",
    "tensor",
    "zeros",
    "avg_pool1d",
    "avg_pool2d",
    "conv1d",
    "conv2d",
    "conv_output_size",
    "max_pool1d",
    "max_pool2d",
    "from_bytes",
    "load",
    "save",
    "to_bytes",
]
