"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64), optionally on a subset of flat indices."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    out = np.zeros(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[n] = (fp - fm) / (2.0 * h)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(b), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def sample_indices(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return np.sort(rng.choice(size, size=count, replace=False))


def one_sided_differences(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6,
                          indices: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward difference slopes of scalar ``f`` at ``x`` on a subset of flat indices."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    f0 = f(x)
    fwd, bwd = np.zeros(idx.size), np.zeros(idx.size)
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fwd[n] = (f(x) - f0) / h
        flat[i] = old - h
        bwd[n] = (f0 - f(x)) / h
        flat[i] = old
    return fwd, bwd


def smooth_mask(fwd: np.ndarray, bwd: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Coordinates whose one-sided slopes agree, i.e. no kink (ReLU, clamp, floor) within the step."""
    return np.abs(fwd - bwd) <= tol * np.maximum(1.0, np.abs(fwd + bwd) / 2)
