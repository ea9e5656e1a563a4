"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return out


def grad_check(f: Callable[[], Tensor], point: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` is re-evaluated from scratch for every perturbation and must read the
    current values of the tensors in ``point`` (perturbed in place).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    point = list(point)
    analytic = grad(f(), point)
    worst = 0.0
    for t, a in zip(point, analytic):
        num = numerical_grad(f, t, eps)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(a))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
