"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f() / d x by central differences, perturbing ``x.data`` in place."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f().item()
        flat[i] = orig - h
        lo = f().item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-14:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_grads(
    f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5, atol: float = 0.0
) -> dict[int, float]:
    """Relative error of the tape gradient for each tensor, keyed by position.

    Gradients that are zero by symmetry (e.g. a bias every softmax logit
    shares) leave only difference noise; ``atol`` reports 0 when the absolute
    discrepancy is below it.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    out = {}
    for i, t in enumerate(tensors):
        num = numeric_grad(f, t, h)
        gap = np.linalg.norm(analytic[i] - num)
        out[i] = 0.0 if gap < atol else relative_error(analytic[i], num)
    return out
