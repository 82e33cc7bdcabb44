"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tensor


def numerical_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``fn()`` with respect to each tensor in ``params``.

    ``fn`` is re-evaluated with each scalar perturbed in place; tensors are
    restored afterwards.
    """
    out = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = float(np.linalg.norm(np.asarray(analytic, dtype=np.float64) - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error between ``backward()`` and central differences, one value per tensor."""
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    numeric = numerical_grads(fn, params, eps)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
