"""Similarity and regularization terms of the registration objective.

Each term takes ``grad=True`` to also return its gradient with respect to
the differentiable argument (the warped image, or the correspondence field
for the occupancy term).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import ssim_map, ssim_map_backward, trilinear_splat, trilinear_splat_backward


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass(frozen=True)
class SSIMParams:
    window: int = 7
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    photometric: float
    ssim: float
    occupancy: float

    def as_dict(self):
        return asdict(self)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def photometric_loss(fixed, warped, grad=False):
    """Mean squared intensity difference."""
    _same_shape(fixed, warped)
    diff = warped - fixed
    value = float(np.mean(diff * diff))
    if not grad:
        return value
    return value, diff * (2.0 / diff.size)


def ssim_loss(fixed, warped, ssim=SSIMParams(), grad=False):
    """``1 - mean(ssim_map)``."""
    _same_shape(fixed, warped)
    kw = dict(window=ssim.window, sigma=ssim.sigma, c1=ssim.c1, c2=ssim.c2)
    value = 1.0 - float(np.mean(ssim_map(fixed, warped, **kw)))
    if not grad:
        return value
    upstream = np.full(fixed.shape, -1.0 / fixed.size, dtype=warped.dtype)
    _, g = ssim_map_backward(upstream, fixed, warped, **kw)
    return value, g


def occupancy(phi, moving_shape):
    """Visit frequency of every moving-image voxel under ``phi``."""
    return trilinear_splat(phi, moving_shape)


def occupancy_loss(phi, moving_shape, grad=False):
    """Sum over axes of the RMS of adjacent-voxel differences of occupancy.

    At a perfectly uniform occupancy the square root has no derivative; the
    zero subgradient is used there.
    """
    B = occupancy(phi, moving_shape)
    value = 0.0
    gB = np.zeros_like(B) if grad else None
    for axis in range(3):
        if B.shape[axis] < 2:
            continue
        d = np.diff(B, axis=axis)
        rms = float(np.sqrt(np.mean(d * d)))
        value += rms
        if grad and rms > 0:
            gd = d / (rms * d.size)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            gB[tuple(hi)] += gd
            gB[tuple(lo)] -= gd
    if not grad:
        return value
    return value, trilinear_splat_backward(gB, phi)


def total_loss(fixed, warped, phi, weights=LossWeights(), ssim=SSIMParams(), grad=False, moving_shape=None):
    """Weighted sum of the three terms.

    Returns a :class:`LossBreakdown`, or with ``grad=True`` a tuple
    ``(breakdown, grad_warped, grad_phi)``.
    """
    _same_shape(fixed, warped)
    moving_shape = fixed.shape if moving_shape is None else moving_shape
    if not grad:
        lp = photometric_loss(fixed, warped)
        ls = ssim_loss(fixed, warped, ssim)
        lo = occupancy_loss(phi, moving_shape)
    else:
        lp, gp = photometric_loss(fixed, warped, grad=True)
        ls, gs = ssim_loss(fixed, warped, ssim, grad=True)
        lo, go = occupancy_loss(phi, moving_shape, grad=True)
    total = weights.alpha * lp + weights.beta * ls + weights.gamma * lo
    breakdown = LossBreakdown(total, lp, ls, lo)
    if not grad:
        return breakdown
    g_warped = weights.alpha * gp + weights.beta * gs
    return breakdown, g_warped, weights.gamma * go
