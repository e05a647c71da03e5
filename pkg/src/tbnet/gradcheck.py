"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    seed: int = 0,
) -> float:
    """Compare autograd against finite differences for ``fn(*inputs)``.

    The output is reduced to a scalar with a fixed random projection so every
    output element contributes. Inputs should be float64 tensors with
    ``requires_grad=True``; returns the worst relative error over all inputs.
    """
    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)

    for t in inputs:
        t.grad = None
    (out * Tensor(proj, dtype=out.dtype)).sum().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def scalar() -> float:
        return float((fn(*inputs).data.astype(np.float64) * proj).sum())

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        num = numerical_gradient(scalar, t.data, eps)
        worst = max(worst, relative_error(a, num))
    return worst
