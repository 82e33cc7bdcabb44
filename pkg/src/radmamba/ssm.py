"""Selective state-space layer: parameter generation, discretisation and scans.

Shapes use ``N`` for sequence length, ``dim`` for channels and ``ds`` for the
per-channel state width.  Every function accepts an optional leading batch
axis; the time axis is always third from the end for state tensors
``(..., N, dim, ds)`` and second from the end for ``(..., N, dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, TensorError, softplus

__all__ = [
    "SsmError",
    "SsmWeights",
    "SsmParams",
    "init_ssm_weights",
    "gen_params",
    "discretize",
    "compose",
    "recurrence_sequential",
    "recurrence_blelloch",
    "linear_recurrence",
    "scan_sequential",
    "scan_parallel",
    "selective_ssm",
]

SCAN_METHODS = ("sequential", "parallel")
DISCRETIZATIONS = ("zoh", "euler")


class SsmError(TensorError, ArithmeticError):
    """Raised on invalid SSM parameters or a non-finite recurrence state."""


@dataclass
class SsmWeights:
    """Learned weights of one selective SSM.

    ``A_log`` holds ``log(-A)`` so the continuous state matrix stays strictly
    negative under any update.  With ``dt_rank == 0`` the two step-size
    projections are ``None`` and the step size depends only on ``dt_bias``.
    """

    A_log: Tensor  # (dim, ds)
    D: Tensor  # (dim,)
    W_B: Tensor  # (dim, ds)
    W_C: Tensor  # (dim, ds)
    W_dt1: Tensor | None  # (dim, dt_rank)
    W_dt2: Tensor | None  # (dt_rank, dim)
    dt_bias: Tensor  # (dim,)

    @property
    def dim(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return 0 if self.W_dt1 is None else self.W_dt1.shape[1]

    @property
    def A(self) -> Tensor:
        return -self.A_log.exp()

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for key in ("A_log", "D", "W_B", "W_C", "W_dt1", "W_dt2", "dt_bias"):
            t = getattr(self, key)
            if t is not None:
                yield key, t


@dataclass
class SsmParams:
    """Input-dependent quantities for one sequence.

    ``Abar``/``Bbar`` are filled in by :func:`discretize`.
    """

    delta: Tensor  # (..., N, dim)
    B: Tensor  # (..., N, ds)
    C: Tensor  # (..., N, ds)
    Abar: Tensor | None = None  # (..., N, dim, ds)
    Bbar: Tensor | None = None  # (..., N, dim, ds)


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_weights(dim: int, d_state: int, dt_rank: int, rng: np.random.Generator, precision=None) -> SsmWeights:
    """S4D-real style init: ``A[d, s] = -(s + 1)``, ``D = 1``, step sizes in [1e-3, 1e-1]."""
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (dim, 1)))

    def unif(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, precision=precision)

    W_B = unif((dim, d_state), dim)
    W_C = unif((dim, d_state), dim)
    W_dt1 = unif((dim, dt_rank), dim) if dt_rank > 0 else None
    W_dt2 = unif((dt_rank, dim), dt_rank) if dt_rank > 0 else None
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=dim))
    return SsmWeights(
        A_log=Tensor(a_log, requires_grad=True, precision=precision),
        D=Tensor(np.ones(dim), requires_grad=True, precision=precision),
        W_B=W_B,
        W_C=W_C,
        W_dt1=W_dt1,
        W_dt2=W_dt2,
        dt_bias=Tensor(_softplus_inv(dt), requires_grad=True, precision=precision),
    )


def gen_params(x: Tensor, w: SsmWeights) -> SsmParams:
    """Project the input sequence (..., N, dim) to step sizes and B, C."""
    if x.shape[-1] != w.dim:
        raise ShapeError(f"SSM input width {x.shape[-1]} does not match weights for dim={w.dim}")
    B = x @ w.W_B
    C = x @ w.W_C
    if w.dt_rank > 0:
        delta = softplus((x @ w.W_dt1) @ w.W_dt2 + w.dt_bias)
    else:
        delta = softplus(w.dt_bias + x * 0.0)
    return SsmParams(delta=delta, B=B, C=C)


def discretize(A: Tensor, B: Tensor, delta: Tensor, mode: str = "zoh") -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretisation, elementwise per (channel, state).

    ``A`` is (dim, ds) and strictly negative, ``B`` is (..., N, ds) and
    ``delta`` is (..., N, dim).  Returns ``Abar = exp(delta * A)`` and
    ``Bbar = expm1(delta * A) / A * B``.  ``mode="euler"`` uses
    ``Bbar = delta * B`` instead.
    """
    if mode not in DISCRETIZATIONS:
        raise ValueError(f"unknown discretization {mode!r}; expected one of {DISCRETIZATIONS}")
    if not isinstance(A, Tensor):
        A = Tensor(A, precision=delta.precision)
    if np.any(A.data >= 0):
        raise SsmError("state matrix A must be strictly negative")
    dA = delta.expand_dims(-1) * A
    Abar = dA.exp()
    Bx = B.expand_dims(-2)
    if mode == "zoh":
        Bbar = dA.expm1() / A * Bx
    else:
        Bbar = delta.expand_dims(-1) * Bx + dA * 0.0
    return Abar, Bbar


def compose(p1: tuple, p2: tuple) -> tuple:
    """Apply affine map ``h -> a1 h + b1`` and then ``h -> a2 h + b2``."""
    a1, b1 = p1
    a2, b2 = p2
    return a2 * a1, a2 * b1 + b2


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``h[n] = a[n] h[n-1] + b[n]`` along axis 0 with ``h[-1] = 0``."""
    h = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    prev = np.zeros(h.shape[1:], dtype=h.dtype)
    for n in range(h.shape[0]):
        prev = a[n] * prev + b[n]
        h[n] = prev
    return h


def recurrence_blelloch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Work-efficient (up-sweep / down-sweep) scan of the same recurrence.

    The sequence is padded to a power of two with the identity map (1, 0).
    """
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    n = shape[0]
    size = 1 << max(0, (n - 1).bit_length())
    A = np.ones((size,) + shape[1:], dtype=dtype)
    B = np.zeros((size,) + shape[1:], dtype=dtype)
    A[:n] = np.broadcast_to(a, shape)
    B[:n] = np.broadcast_to(b, shape)

    step = 1
    while step < size:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        step *= 2

    # Down-sweep turns block totals into exclusive prefixes.
    A[-1] = 1
    B[-1] = 0
    step = size // 2
    while step >= 1:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        a_l, b_l = A[left].copy(), B[left].copy()
        A[left], B[left] = A[right], B[right]
        B[right] = a_l * B[right] + b_l
        A[right] = a_l * A[right]
        step //= 2

    # Inclusive state from the exclusive prefix (applied to h[-1] = 0).
    return np.broadcast_to(a, shape) * B[:n] + np.broadcast_to(b, shape)


_RECURRENCES = {"sequential": recurrence_sequential, "parallel": recurrence_blelloch}


def _check_finite(h: np.ndarray, what: str) -> None:
    if np.all(np.isfinite(h)):
        return
    bad = ~np.isfinite(h.reshape(h.shape[0], -1)).all(axis=1)
    raise SsmError(f"non-finite {what} at step {int(np.argmax(bad))}")


def linear_recurrence(a: Tensor, b: Tensor, method: str = "sequential", axis: int = -3) -> Tensor:
    """Differentiable ``h[n] = a[n] h[n-1] + b[n]`` along ``axis``.

    The backward pass is itself a reversed linear recurrence, evaluated with
    the same method as the forward pass.
    """
    if method not in _RECURRENCES:
        raise ValueError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")
    if a.shape != b.shape:
        raise ShapeError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    run = _RECURRENCES[method]
    ad = np.moveaxis(a.data, axis, 0)
    bd = np.moveaxis(b.data, axis, 0)
    h = run(ad, bd)
    _check_finite(h, "state")

    def bw(g):
        g0 = np.moveaxis(g, axis, 0)
        a_next = np.zeros_like(ad)
        a_next[:-1] = ad[1:]
        gb = run(a_next[::-1], g0[::-1])[::-1]
        _check_finite(gb, "state gradient")
        h_prev = np.zeros_like(h)
        h_prev[1:] = h[:-1]
        return np.moveaxis(gb * h_prev, 0, axis), np.moveaxis(gb, 0, axis)

    return Tensor._from_op(np.moveaxis(h, 0, axis), (a, b), bw)


def _scan(x: Tensor, p: SsmParams, C: Tensor, D: Tensor, method: str) -> Tensor:
    if p.Abar is None or p.Bbar is None:
        raise SsmError("SSM parameters are not discretised; call discretize first")
    if p.Abar.shape[:-1] != x.shape or p.Bbar.shape != p.Abar.shape:
        raise ShapeError(f"state tensors {p.Abar.shape}/{p.Bbar.shape} do not match input {x.shape}")
    if C.shape[:-1] != x.shape[:-1] or C.shape[-1] != p.Abar.shape[-1]:
        raise ShapeError(f"C shape {C.shape} does not match input {x.shape} and state width {p.Abar.shape[-1]}")
    h = linear_recurrence(p.Abar, p.Bbar * x.expand_dims(-1), method)
    return (h * C.expand_dims(-2)).sum(axis=-1) + D * x


def scan_sequential(x: Tensor, p: SsmParams, C: Tensor | None = None, D: Tensor | None = None) -> Tensor:
    """Reference recurrence, one step at a time.

    ``y[n, d] = sum_s C[n, s] h[n, d, s] + D[d] x[n, d]``.
    """
    return _scan(x, p, p.C if C is None else C, D if D is not None else x * 0.0, "sequential")


def scan_parallel(x: Tensor, p: SsmParams, C: Tensor | None = None, D: Tensor | None = None) -> Tensor:
    """Same output as :func:`scan_sequential` via an associative scan."""
    return _scan(x, p, p.C if C is None else C, D if D is not None else x * 0.0, "parallel")


def selective_ssm(x: Tensor, w: SsmWeights, method: str = "parallel", discretization: str = "zoh") -> Tensor:
    """Full selective SSM over (..., N, dim)."""
    p = gen_params(x, w)
    p.Abar, p.Bbar = discretize(w.A, p.B, p.delta, discretization)
    return _scan(x, p, p.C, w.D, method)
