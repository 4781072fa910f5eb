"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm, 0 when both vanish."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < floor:
        return 0.0 if num < floor else np.inf
    return num / den


def numeric_grad(fn, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Elementwise central differences of scalar ``fn()`` w.r.t. ``x.data``."""
    x.data = np.ascontiguousarray(x.data)
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(fn, tensors) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(fn, tensors, h: float = 1e-5) -> dict:
    """Relative error per tensor between backprop and central differences."""
    grads = analytic_grads(fn, tensors)
    return {i: rel_error(g, numeric_grad(fn, t, h)) for i, (t, g) in enumerate(zip(tensors, grads))}


def check_directional(fn, tensors, rng, n_dirs: int = 3, h: float = 1e-5) -> float:
    """Worst relative error of ``<grad, v>`` against a central difference along random ``v``.

    Cheap enough for whole networks where elementwise checks are not.
    """
    grads = analytic_grads(fn, tensors)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.normal(size=t.shape) for t in tensors]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
        origs = [t.data.copy() for t in tensors]
        for t, o, v in zip(tensors, origs, dirs):
            t.data = o + h * v
        fp = float(fn().data)
        for t, o, v in zip(tensors, origs, dirs):
            t.data = o - h * v
        fm = float(fn().data)
        for t, o in zip(tensors, origs):
            t.data = o
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, rel_error(np.array([analytic]), np.array([numeric])))
    return worst
