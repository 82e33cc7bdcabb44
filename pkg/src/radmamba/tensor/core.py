"""Dense tensors with a reverse-mode differentiation tape.

A :class:`Tensor` wraps a contiguous numpy array.  Every operation on tensors
that require gradients records its parents and a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` walks that graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Precision",
    "Tensor",
    "TensorError",
    "ShapeError",
    "PrecisionError",
    "TapeError",
    "precision",
    "get_default_precision",
    "set_default_precision",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "exp",
    "expm1",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "softplus",
    "elementwise",
    "SOFTPLUS_THRESHOLD",
]

SOFTPLUS_THRESHOLD = 30.0


class TensorError(Exception):
    """Base class for tensor-core errors."""


class ShapeError(TensorError, ValueError):
    pass


class PrecisionError(TensorError, TypeError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)

    @classmethod
    def from_dtype(cls, dtype) -> "Precision":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float64:
            return cls.F64
        raise PrecisionError(f"unsupported dtype {dtype}; expected float32 or float64")


_state = {"precision": Precision.F32, "grad": True}


def get_default_precision() -> Precision:
    return _state["precision"]


def set_default_precision(p: Precision | str) -> None:
    _state["precision"] = Precision(p)


@contextlib.contextmanager
def precision(p: Precision | str) -> Iterator[None]:
    """Temporarily change the precision used for new tensors."""
    old = _state["precision"]
    _state["precision"] = Precision(p)
    try:
        yield
    finally:
        _state["precision"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """N-dimensional array of reals that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, precision: Precision | str | None = None, name: str | None = None):
        if precision is not None:
            dtype = Precision(precision).dtype
        elif isinstance(data, Tensor):
            dtype = data.dtype
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = get_default_precision().dtype
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, order="C")
        out.grad = None
        out.name = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> Precision:
        return Precision.from_dtype(self.data.dtype)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, precision=self.precision)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, {self.precision.value}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # coercion ----------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise PrecisionError(f"cannot mix {self.precision.value} and {other.precision.value} tensors in one graph")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("add", self.shape, other.shape)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), bw)

    def __radd__(self, other) -> "Tensor":
        return self._coerce(other) + self

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("sub", self.shape, other.shape)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), bw)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("mul", self.shape, other.shape)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(a.data * b.data, (a, b), bw)

    def __rmul__(self, other) -> "Tensor":
        return self._coerce(other) * self

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("div", self.shape, other.shape)
        a, b = self, other

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

        return Tensor._from_op(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self
        p = float(exponent)

        def bw(g):
            return (g * p * x.data ** (p - 1),)

        return Tensor._from_op(x.data**p, (x,), bw)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(self._coerce(other), self)

    # unary math ----------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def expm1(self) -> "Tensor":
        x = self
        return Tensor._from_op(np.expm1(x.data), (x,), lambda g: (g * np.exp(x.data),))

    def log(self) -> "Tensor":
        x = self
        return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * 0.5 / out,))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1 - out),))

    def silu(self) -> "Tensor":
        x = self
        s = _sigmoid(x.data)

        def bw(g):
            return (g * s * (1 + x.data * (1 - s)),)

        return Tensor._from_op(x.data * s, (x,), bw)

    def softplus(self) -> "Tensor":
        x = self
        big = x.data > SOFTPLUS_THRESHOLD
        out = np.where(big, x.data, np.log1p(np.exp(np.minimum(x.data, SOFTPLUS_THRESHOLD))))

        def bw(g):
            return (g * np.where(big, 1.0, _sigmoid(x.data)).astype(x.dtype),)

        return Tensor._from_op(out.astype(x.dtype), (x,), bw)

    # reductions -----------------------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        x = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

        return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), (x,), bw)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        """Maximum along a single axis; the gradient goes to the first maximiser."""
        x = self
        axis = axis % x.ndim
        idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        out = np.take_along_axis(x.data, idx, axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros(x.shape, dtype=x.dtype)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return Tensor._from_op(out if keepdims else np.squeeze(out, axis), (x,), bw)

    # shape manipulation --------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        try:
            out = x.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
        return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(a % self.ndim for a in axes) != list(range(self.ndim)):
            raise ShapeError(f"invalid permutation {axes} for shape {self.shape}")
        inv = np.argsort([a % self.ndim for a in axes])
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        perm = list(range(self.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        return self.transpose(perm)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def flip(self, axis: int) -> "Tensor":
        return Tensor._from_op(np.flip(self.data, axis), (self,), lambda g: (np.flip(g, axis),))

    def expand_dims(self, axis: int) -> "Tensor":
        shape = np.expand_dims(self.data, axis).shape
        return self.reshape(shape)

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.intp)
        x = self

        def bw(g):
            full = np.zeros(x.shape, dtype=x.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(np.asarray(x.data[idx]), (x,), bw)

    # differentiation -------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf with d(self)/d(leaf).

        Gradients are assigned, not accumulated, so running a fresh forward and
        calling backward again yields the same values.
        """
        if self.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise TapeError("loss is detached from the tape (no input requires grad)")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# constructors ---------------------------------------------------------------
def tensor(data, requires_grad: bool = False, precision: Precision | str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, precision=precision)


def zeros(shape, requires_grad: bool = False, precision: Precision | str | None = None) -> Tensor:
    dtype = Precision(precision).dtype if precision else get_default_precision().dtype
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, precision: Precision | str | None = None) -> Tensor:
    dtype = Precision(precision).dtype if precision else get_default_precision().dtype
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# functional forms -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``c[..., i, j] = sum_p a[..., i, p] * b[..., p, j]``.

    Leading (batch) dimensions broadcast.
    """
    b = a._coerce(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data @ b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    return x.exp()


def expm1(x: Tensor) -> Tensor:
    return x.expm1()


def log(x: Tensor) -> Tensor:
    return x.log()


def sqrt(x: Tensor) -> Tensor:
    return x.sqrt()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def silu(x: Tensor) -> Tensor:
    return x.silu()


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))``, switching to the identity above ``SOFTPLUS_THRESHOLD``."""
    return x.softplus()


_UNARY = {"exp": exp, "log": log, "neg": lambda x: -x, "silu": silu, "softplus": softplus}
_BINARY = {"add": lambda x, y: x + y, "mul": lambda x, y: x * y}


def elementwise(op: str, x: Tensor, y: Tensor | float | None = None, axis: int | None = None) -> Tensor:
    """Dispatch one of the named elementwise/reduction ops by string."""
    if op in _UNARY:
        return _UNARY[op](x)
    if op in _BINARY:
        if y is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](x, y)
    if op == "max":
        if y is not None:
            raise TypeError("max is a reduction; pass axis, not a second operand")
        return x.max(axis=-1 if axis is None else axis)
    if op in ("mean", "mean-reduce"):
        return x.mean(axis=axis)
    raise ValueError(f"unknown elementwise op {op!r}")
