"""Channel fusion with downsampling, patch segmentation and embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, avg_pool2d, conv2d, max_pool2d
from .tensor.functional import batch_norm2d, linear

__all__ = [
    "ChanDsConfig",
    "ConvBnParams",
    "PatchGeometry",
    "pooling_plan",
    "chan_ds_output_shape",
    "chan_ds",
    "segment",
    "unsegment",
    "patch_embed",
    "sinusoidal_table",
    "pos_encode",
]

AVGPOOL_THRESHOLD = 8


@dataclass(frozen=True)
class ChanDsConfig:
    """Front end: ``n_blocks`` x (conv2d + batchnorm), then pooling by ``factors``.

    ``factors`` are the reduction ratios (H / H_cd, W / W_cd).  ``use_avgpool``
    of ``None`` engages the average pool only when the residual time factor
    after the 2x2 max pool exceeds 8.
    """

    n_blocks: int = 1
    channels: int = 1
    kernel: tuple[int, int] = (3, 3)
    factors: tuple[int, int] = (2, 2)
    use_avgpool: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))

    def problems(self) -> list[str]:
        out = []
        if self.n_blocks not in (1, 2):
            out.append(f"chan_ds.n_blocks must be 1 or 2, got {self.n_blocks}")
        if self.channels < 1:
            out.append(f"chan_ds.channels must be >= 1, got {self.channels}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            out.append(f"chan_ds.kernel must be odd and positive, got {self.kernel}")
        if any(f < 1 for f in self.factors):
            out.append(f"chan_ds.factors must be >= 1, got {self.factors}")
        return out


def _split_even(n: int) -> tuple[int, int]:
    """Factor n = a * b with a >= b and b as large as possible."""
    b = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    return n // b, b


def pooling_plan(cfg: ChanDsConfig) -> list[tuple[str, tuple[int, int]]]:
    """Ordered pooling stages realising ``cfg.factors`` exactly.

    A 2x2 max pool runs first whenever both factors are even; the residual
    time factor goes to a 1-D max pool (split with a 1-D average pool when
    large), and any residual Doppler factor to a 1-D max pool along Doppler.
    """
    rh, rw = cfg.factors
    plan: list[tuple[str, tuple[int, int]]] = []
    if rh % 2 == 0 and rw % 2 == 0:
        plan.append(("maxpool2d", (2, 2)))
        rh, rw = rh // 2, rw // 2
    if rw > 1:
        use_avg = cfg.use_avgpool if cfg.use_avgpool is not None else rw > AVGPOOL_THRESHOLD
        kmax, kavg = _split_even(rw) if use_avg else (rw, 1)
        plan.append(("maxpool1d_time", (1, kmax)))
        if kavg > 1:
            plan.append(("avgpool1d_time", (1, kavg)))
    if rh > 1:
        plan.append(("maxpool1d_doppler", (rh, 1)))
    return plan


def chan_ds_output_shape(input_shape: Sequence[int], cfg: ChanDsConfig) -> tuple[int, int, int]:
    C, H, W = input_shape
    rh, rw = cfg.factors
    if H % rh or W % rw:
        raise ShapeError(f"reduction factors {cfg.factors} do not divide input extents {(H, W)}")
    return cfg.channels, H // rh, W // rw


@dataclass
class ConvBnParams:
    """One fusion block: conv weights/bias, batchnorm affine and running statistics."""

    conv_weight: Tensor
    conv_bias: Tensor
    bn_weight: Tensor
    bn_bias: Tensor
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        C = self.conv_weight.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(C)
        if self.running_var is None:
            self.running_var = np.ones(C)


def chan_ds(x: Tensor, cfg: ChanDsConfig, blocks: Sequence[ConvBnParams], training: bool = False, batchnorm: bool = True) -> Tensor:
    """(B, C, H, W) -> (B, C_cd, H / r_H, W / r_W).

    ``batchnorm=False`` skips normalisation entirely (used by property tests).
    """
    if x.ndim == 3:
        return chan_ds(x.reshape((1,) + x.shape), cfg, blocks, training, batchnorm).reshape(
            chan_ds_output_shape(x.shape, cfg)
        )
    chan_ds_output_shape(x.shape[1:], cfg)
    if len(blocks) != cfg.n_blocks:
        raise ShapeError(f"expected {cfg.n_blocks} fusion blocks, got {len(blocks)}")
    ph, pw = cfg.kernel[0] // 2, cfg.kernel[1] // 2
    for blk in blocks:
        x = conv2d(x, blk.conv_weight, blk.conv_bias, padding=(ph, pw))
        if batchnorm:
            x = batch_norm2d(x, blk.bn_weight, blk.bn_bias, blk.running_mean, blk.running_var, training)
    for kind, k in pooling_plan(cfg):
        x = avg_pool2d(x, k) if kind.startswith("avg") else max_pool2d(x, k)
    return x


@dataclass(frozen=True)
class PatchGeometry:
    """How the fused map is cut into tokens.

    ``doppler_aligned``: full Doppler extent x 1 time bin (one token per time bin).
    ``rectangular``: fixed (H_seg, W_seg) tiles in row-major order.
    ``time_aligned``: 1 Doppler bin x full time extent.
    """

    kind: str = "doppler_aligned"
    size: tuple[int, int] | None = None

    KINDS = ("doppler_aligned", "rectangular", "time_aligned")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown patch geometry {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "rectangular":
            if self.size is None or len(self.size) != 2 or min(self.size) < 1:
                raise ValueError("rectangular geometry needs size=(H_seg, W_seg)")
            object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))

    @classmethod
    def doppler_aligned(cls) -> "PatchGeometry":
        return cls("doppler_aligned")

    @classmethod
    def rectangular(cls, h: int, w: int) -> "PatchGeometry":
        return cls("rectangular", (h, w))

    @classmethod
    def time_aligned(cls) -> "PatchGeometry":
        return cls("time_aligned")

    def patch_size(self, H: int, W: int) -> tuple[int, int]:
        if self.kind == "doppler_aligned":
            return H, 1
        if self.kind == "time_aligned":
            return 1, W
        return self.size

    def check(self, C: int, H: int, W: int) -> tuple[int, int]:
        hs, ws = self.patch_size(H, W)
        if H % hs or W % ws:
            raise ShapeError(f"patch size {(hs, ws)} does not divide fused extents {(H, W)}")
        return (H // hs) * (W // ws), C * hs * ws

    def n_patches(self, C: int, H: int, W: int) -> int:
        return self.check(C, H, W)[0]

    def patch_dim(self, C: int, H: int, W: int) -> int:
        return self.check(C, H, W)[1]

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.size is not None:
            d["size"] = list(self.size)
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "PatchGeometry":
        if isinstance(d, str):
            return cls(d)
        size = d.get("size")
        return cls(d["kind"], tuple(size) if size is not None else None)


def segment(x: Tensor, g: PatchGeometry) -> Tensor:
    """(B, C, H, W) -> (B, N, C * H_seg * W_seg).

    Patches are ordered row-major over the patch grid (time index fastest);
    inside a patch values are flattened channel, then Doppler, then time.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    B, C, H, W = x.shape
    hs, ws = g.patch_size(H, W)
    n, p = g.check(C, H, W)
    I, J = H // hs, W // ws
    out = x.reshape(B, C, I, hs, J, ws).transpose(0, 2, 4, 1, 3, 5).reshape(B, n, p)
    return out.reshape(n, p) if squeeze else out


def unsegment(patches: Tensor, g: PatchGeometry, shape: Sequence[int]) -> Tensor:
    """Inverse of :func:`segment` for a (C, H, W) target shape."""
    squeeze = patches.ndim == 2
    if squeeze:
        patches = patches.reshape((1,) + patches.shape)
    C, H, W = shape
    hs, ws = g.patch_size(H, W)
    g.check(C, H, W)
    B = patches.shape[0]
    out = patches.reshape(B, H // hs, W // ws, C, hs, ws).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
    return out.reshape(C, H, W) if squeeze else out


def patch_embed(xseg: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-patch affine map (N, P) -> (N, dim)."""
    if xseg.shape[-1] != weight.shape[0]:
        raise ShapeError(f"patch dim {xseg.shape[-1]} does not match embedding weight {weight.shape}")
    return linear(xseg, weight, bias)


def sinusoidal_table(n: int, dim: int, dtype=np.float64) -> np.ndarray:
    """``PE[n, 2i] = sin(n / 10000^(2i/dim))``, ``PE[n, 2i+1] = cos(...)``."""
    if dim % 2:
        raise ShapeError(f"sinusoidal position encoding needs an even dim, got {dim}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((n, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)


def pos_encode(x: Tensor) -> Tensor:
    n, dim = x.shape[-2], x.shape[-1]
    return x + sinusoidal_table(n, dim, x.dtype)
