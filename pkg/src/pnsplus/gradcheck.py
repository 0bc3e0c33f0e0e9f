"""Central finite differences, used as the oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate d f(x) / d x entry by entry with ``(f(x+h) - f(x-h)) / 2h``.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over
    ``x`` (e.g. a model parameter) instead of taking it as an argument.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.grad = None
    backward(f(x))
    return np.zeros_like(x.data) if x.grad is None else x.grad.copy()


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries.

    The floor keeps entries whose true gradient is ~0 from dividing by noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
