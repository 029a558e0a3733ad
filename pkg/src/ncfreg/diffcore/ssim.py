"""Local 3D SSIM with a separable Gaussian window and its adjoint."""

import numpy as np


def gaussian_window(size, sigma, dtype=np.float64):
    if size < 1 or size % 2 == 0:
        raise ValueError(f"SSIM window size must be a positive odd integer, got {size}")
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return (g / g.sum()).astype(dtype)


def _filter_axis(x, g, axis):
    r = len(g) // 2
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    pad = [(r, r)] + [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x, pad, mode="edge")
    out = g[0] * xp[0:n]
    for k in range(1, len(g)):
        out += g[k] * xp[k:k + n]
    return np.moveaxis(out, 0, axis)


def _filter_axis_adjoint(y, g, axis):
    r = len(g) // 2
    y = np.moveaxis(y, axis, 0)
    n = y.shape[0]
    gp = np.zeros((n + 2 * r,) + y.shape[1:], dtype=y.dtype)
    for k in range(len(g)):
        gp[k:k + n] += g[k] * y
    out = gp[r:r + n].copy()
    out[0] += gp[:r].sum(axis=0)
    out[-1] += gp[r + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def blur(x, g):
    """Separable Gaussian smoothing with replicate padding."""
    for axis in range(3):
        x = _filter_axis(x, g, axis)
    return x


def blur_adjoint(y, g):
    for axis in range(3):
        y = _filter_axis_adjoint(y, g, axis)
    return y


def _check(a, b, window):
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"SSIM inputs must be equal-shape 3D arrays, got {a.shape} and {b.shape}")
    if window % 2 == 0:
        raise ValueError(f"SSIM window size must be odd, got {window}")
    if window > min(a.shape):
        raise ValueError(f"SSIM window {window} exceeds the smallest volume axis of shape {a.shape}")


def _moments(a, b, g):
    mu_a, mu_b = blur(a, g), blur(b, g)
    var_a = blur(a * a, g) - mu_a * mu_a
    var_b = blur(b * b, g) - mu_b * mu_b
    cov = blur(a * b, g) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(a, b, window=7, sigma=1.5, c1=1e-4, c2=9e-4):
    """Per-voxel SSIM of two volumes normalized to [0, 1]."""
    _check(a, b, window)
    g = gaussian_window(window, sigma, np.result_type(a, b))
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, g)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim_map_backward(grad_out, a, b, window=7, sigma=1.5, c1=1e-4, c2=9e-4):
    """Return ``(grad_a, grad_b)`` for :func:`ssim_map`."""
    _check(a, b, window)
    g = gaussian_window(window, sigma, np.result_type(a, b))
    mu_a, mu_b, var_a, var_b, cov = _moments(a, b, g)
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * cov + c2
    B1 = mu_a ** 2 + mu_b ** 2 + c1
    B2 = var_a + var_b + c2
    s = (A1 * A2) / (B1 * B2)

    dA1 = grad_out * A2 / (B1 * B2)
    dA2 = grad_out * A1 / (B1 * B2)
    dB1 = -grad_out * s / B1
    dB2 = -grad_out * s / B2

    # B2 = E[a^2] - mu_a^2 + E[b^2] - mu_b^2 + c2 ; A2 = 2 (E[ab] - mu_a mu_b) + c2
    d_mu_a = 2 * mu_b * dA1 - 2 * mu_b * dA2 + 2 * mu_a * dB1 - 2 * mu_a * dB2
    d_mu_b = 2 * mu_a * dA1 - 2 * mu_a * dA2 + 2 * mu_b * dB1 - 2 * mu_b * dB2
    d_eab = blur_adjoint(2 * dA2, g)
    d_esq = blur_adjoint(dB2, g)

    grad_a = blur_adjoint(d_mu_a, g) + 2 * a * d_esq + b * d_eab
    grad_b = blur_adjoint(d_mu_b, g) + 2 * b * d_esq + a * d_eab
    return grad_a, grad_b
