"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, backward


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-3):
    """d fn / d arrays[index] by central differences, evaluated in float64."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + h
        fp = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        target[i] = orig - h
        fm = fn(*[Tensor(a, dtype=np.float64) for a in base]).item()
        target[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with GradTape() as tape:
        out = fn(*inputs)
    backward(tape, out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3,
              wrt: Sequence[int] | None = None) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = analytic_grads(fn, arrays)
    idx = range(len(arrays)) if wrt is None else wrt
    return max(relative_error(analytic[i], numerical_grad(fn, arrays, i, h)) for i in idx)
