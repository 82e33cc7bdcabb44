"""Convolution and pooling on :class:`Tensor`.

Both convolutions are cross-correlations.  The default path accumulates one
matrix product per kernel tap (im2col done tap by tap, so no k-fold copy of the
input is materialised); ``method="direct"`` is the plain nested-loop reference
that the fast path is tested against.
"""

from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor

__all__ = ["conv2d", "conv1d", "max_pool2d", "avg_pool2d", "max_pool1d", "avg_pool1d", "conv_output_size"]


def conv_output_size(n: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv2d_direct(xp: np.ndarray, w: np.ndarray, stride: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    B = xp.shape[0]
    O, _, kh, kw = w.shape
    Ho, Wo = out_hw
    sh, sw = stride
    out = np.zeros((B, O, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    win = xp[b, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                    out[b, o, i, j] = np.sum(win * w[o])
    return out


def _tap(xp: np.ndarray, i: int, j: int, stride: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    sh, sw = stride
    Ho, Wo = out_hw
    return xp[:, :, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw]


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    method: str = "fast",
) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``(C, H, W)`` or batched ``(B, C, H, W)``; ``w`` is
    ``(C_out, C, kh, kw)``.  Output extent is ``(H + 2p - kh) // s + 1``.
    """
    w = x._coerce(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x (B,C,H,W) and w (O,C,kh,kw), got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {(H + 2 * ph, W + 2 * pw)}")
    if bias is not None:
        bias = x._coerce(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({O},)")
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wd = w.data

    if method == "direct":
        out = _conv2d_direct(xp, wd, (sh, sw), (Ho, Wo))
    elif method == "fast":
        out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("oc,bchw->bohw", wd[:, :, i, j], _tap(xp, i, j, (sh, sw), (Ho, Wo)), optimize=True)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, _tap(xp, i, j, (sh, sw), (Ho, Wo)), optimize=True)
                _tap(gxp, i, j, (sh, sw), (Ho, Wo))[...] += np.einsum("oc,bohw->bchw", wd[:, :, i, j], g, optimize=True)
        gx = gxp[:, :, ph : ph + H, pw : pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    y = Tensor._from_op(out.astype(x.dtype, copy=False), parents, bw)
    return y.reshape(y.shape[1:]) if squeeze else y


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    stride: int = 1,
    method: str = "fast",
) -> Tensor:
    """1-D cross-correlation along the last axis.

    ``x`` is ``(D, N)`` or ``(B, D, N)``; ``w`` is ``(D_out, D, k)``.
    """
    w = x._coerce(w)
    if w.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (D_out, D, k), got {w.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects x (D,N) or (B,D,N), got {x.shape}")
    k = w.shape[2]
    if k > x.shape[2] + 2 * padding:
        raise ShapeError(f"conv1d kernel {k} larger than padded input {x.shape[2] + 2 * padding}")
    y = conv2d(
        x.reshape(x.shape[0], x.shape[1], 1, x.shape[2]),
        w.reshape(w.shape[0], w.shape[1], 1, k),
        bias,
        stride=(1, stride),
        padding=(0, padding),
        method=method,
    )
    y = y.reshape(y.shape[0], y.shape[1], y.shape[3])
    return y.reshape(y.shape[1:]) if squeeze else y


def _windows(x: Tensor, kh: int, kw: int, op: str) -> Tensor:
    """Non-overlapping (kh, kw) windows of a (B, C, H, W) tensor gathered on a trailing axis."""
    if x.ndim != 4:
        raise ShapeError(f"{op} expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if kh < 1 or kw < 1 or H % kh or W % kw:
        raise ShapeError(f"{op}: kernel {(kh, kw)} does not tile input extents {(H, W)}")
    v = x.reshape(B, C, H // kh, kh, W // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(B, C, H // kh, W // kw, kh * kw)


def max_pool2d(x: Tensor, kernel) -> Tensor:
    """Max pooling with stride equal to the kernel; extents must divide exactly."""
    kh, kw = _pair(kernel)
    if kh == kw == 1:
        return x
    return _windows(x, kh, kw, "max_pool2d").max(axis=-1)


def avg_pool2d(x: Tensor, kernel) -> Tensor:
    kh, kw = _pair(kernel)
    if kh == kw == 1:
        return x
    return _windows(x, kh, kw, "avg_pool2d").mean(axis=-1)


def max_pool1d(x: Tensor, k: int, axis: int = -1) -> Tensor:
    """1-D max pooling of a (B, C, H, W) tensor along H (axis=-2) or W (axis=-1)."""
    return max_pool2d(x, (k, 1) if axis in (-2, 2) else (1, k))


def avg_pool1d(x: Tensor, k: int, axis: int = -1) -> Tensor:
    return avg_pool2d(x, (k, 1) if axis in (-2, 2) else (1, k))
