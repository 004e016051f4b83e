"""Central finite-difference gradient oracle.

The analytic gradient comes from the regular float32 graph. The numeric
gradient re-evaluates the same function with every input promoted to
float64, so float32 rounding does not pollute the difference quotient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |n|, 1e-8): error relative to the gradient's scale."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic.astype(np.float64) - numeric).max(initial=0.0)) / scale


def numeric_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    saved = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(np.float64)
    grads = []
    try:
        for t in inputs:
            g = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn().data.sum())
                flat[i] = orig - eps
                fm = float(fn().data.sum())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
    return grads


def analytic_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = fn()
        out.sum().backward() if out.size != 1 else out.backward()
        return [t.grad if t.grad is not None else np.zeros(t.shape, t.dtype) for t in inputs]
    finally:
        for t, f in zip(inputs, flags):
            t.requires_grad = f
            t.grad = None


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> list[float]:
    """Relative error of the analytic gradient of ``sum(fn())`` for each input."""
    a = analytic_grad(fn, inputs)
    n = numeric_grad(fn, inputs, eps)
    return [relative_error(x, y) for x, y in zip(a, n)]
