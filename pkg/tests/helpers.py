"""Shared test utilities: error measures, finite differences, case draws."""

from __future__ import annotations

import numpy as np

from hla.kernel import HLAConfig


def rel_err(a: np.ndarray, b: np.ndarray, floor_frac: float = 1e-3) -> float:
    """Worst per-coordinate relative error against reference b.

    Denominators are floored at floor_frac times the largest reference
    magnitude so near-zero coordinates are judged on that scale instead
    of blowing up the ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = floor_frac * float(np.max(np.abs(b)))
    if floor == 0.0:
        floor = np.finfo(np.float64).tiny
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def rel_err_strict(a, b) -> float:
    """Per-coordinate relative error with no floor; for quantities that
    are bounded away from zero (row sums of positive scores, etc.)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(denom > 0, np.abs(a - b) / denom, 0.0)
    return float(np.max(err)) if err.size else 0.0


def scalar_rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return abs(a - b) / denom if denom > 0 else 0.0


def draw_kernel_case(rng, *, b=2, h=2, n=16, d=8, d_phi=4, factors=2, dtype=np.float64,
                     low=0.0, high=1.0):
    """Nonnegative feature activations plus gaussian values."""
    fq = rng.uniform(low, high, size=(b, h, n, d_phi)).astype(dtype)
    fks = [rng.uniform(low, high, size=(b, h, n, d_phi)).astype(dtype) for _ in range(factors)]
    v = rng.standard_normal((b, h, n, d)).astype(dtype)
    return fq, fks, v


def decay_mask(n: int, decay: float, dtype=np.float64) -> np.ndarray:
    idx = np.arange(n)
    delta = idx[:, None] - idx[None, :]
    return np.where(delta >= 0, float(decay) ** delta, 0.0).astype(dtype)


def make_cfg(factors=2, d_phi=4, head_dim=8, **kw) -> HLAConfig:
    return HLAConfig(factors=factors, d_phi=d_phi, head_dim=head_dim, **kw)


def fd_gradient(loss_fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of loss_fn with respect to every
    coordinate of array (mutated in place and restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_compare(analytic: np.ndarray, numeric: np.ndarray, *, abs_floor: float = 1e-8) -> float:
    """Worst relative disagreement between gradients, ignoring pairs whose
    joint magnitude sits below abs_floor (both effectively zero)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    worst = 0.0
    for ai, ni in zip(a, n):
        denom = max(abs(ai), abs(ni))
        if denom <= abs_floor:
            continue
        worst = max(worst, abs(ai - ni) / denom)
    return worst
