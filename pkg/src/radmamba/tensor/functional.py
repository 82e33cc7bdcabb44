"""Composite layers built from tensor primitives."""

from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor

__all__ = ["linear", "layer_norm", "batch_norm2d"]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = x @ weight
    return y if bias is None else y + bias


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a learned scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * weight + bias


def batch_norm2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of a (B, C, H, W) tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential averaging).
    """
    C = x.shape[1]
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        n = x.size // C
        unbiased = var.data.reshape(C) * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.data.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
        xhat = xc / (var + eps).sqrt()
    else:
        mu = running_mean.reshape(1, C, 1, 1).astype(x.dtype)
        sd = np.sqrt(running_var.reshape(1, C, 1, 1) + eps).astype(x.dtype)
        xhat = (x - mu) / sd
    return xhat * weight.reshape(1, C, 1, 1) + bias.reshape(1, C, 1, 1)
