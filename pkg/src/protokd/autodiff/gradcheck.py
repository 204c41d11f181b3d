"""Central finite-difference gradient checking.

Only forward evaluations are used here, so the estimate is independent of
every backward closure it is compared against.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-6) -> list[np.ndarray]:
    """d fn() / d input for each input, by central differences in place."""
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data, dtype=np.float64)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(fn().data)
                flat[i] = orig - step
                down = float(fn().data)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, abs_floor)`` over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    rtol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> tuple[bool, float]:
    """Compare backward() against central differences; returns (ok, worst error)."""
    ana = analytic_grad(fn, inputs)
    num = numerical_grad(fn, inputs, step)
    worst = max((max_rel_error(a, n, abs_floor) for a, n in zip(ana, num)), default=0.0)
    return worst <= rtol, worst
