"""Dense, activation and 3x3x3 convolution kernels with hand-written backward passes."""

import numpy as np


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    out = x @ weight.T
    out += bias
    return out


def linear_backward(grad_out, x, weight):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def leaky_relu(x, slope=0.01):
    if not 0 <= slope < 1:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    # for slope < 1, max(x, slope*x) is x on x >= 0 and slope*x below
    out = x * x.dtype.type(slope)
    return np.maximum(x, out, out=out)


def leaky_relu_backward(grad_out, x, slope=0.01):
    # derivative at exactly 0 is taken as 1
    # a dense float mask beats a masked ufunc by about 4x
    slope = grad_out.dtype.type(slope)
    out = (x >= 0).astype(grad_out.dtype)
    out *= 1 - slope
    out += slope
    out *= grad_out
    return out


_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def _check_conv(x, weight, bias):
    if x.ndim != 4 or weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d expects input (C, W, H, D) and weight (O, C, 3, 3, 3), got {x.shape}, {weight.shape}")
    if weight.shape[1] != x.shape[0] or bias.shape != (weight.shape[0],):
        raise ValueError(
            f"conv3d channel mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )


def _pad(x):
    return np.pad(x, [(0, 0)] * (x.ndim - 3) + [(1, 1)] * 3, mode="edge")


def _fold(buf):
    """Adjoint of edge padding: add the border layers onto the edge voxels."""
    for axis in (-3, -2, -1):
        buf = np.moveaxis(buf, axis, 0)
        buf[1] += buf[0]
        buf[-2] += buf[-1]
        buf = np.moveaxis(buf[1:-1], 0, axis)
    return buf


def _windows(x):
    """All 27 shifted copies of edge-padded ``x``: shape (27, C, W, H, D)."""
    _, W, H, D = x.shape
    xp = _pad(x)
    return np.stack([xp[:, i:i + W, j:j + H, k:k + D] for i, j, k in _OFFSETS])


def _windows_adjoint(cols):
    """Adjoint of :func:`_windows`, summed over offsets."""
    _, c, W, H, D = cols.shape
    buf = np.zeros((c, W + 2, H + 2, D + 2), dtype=cols.dtype)
    for o, (i, j, k) in enumerate(_OFFSETS):
        buf[:, i:i + W, j:j + H, k:k + D] += cols[o]
    return _fold(buf)


def _shift_sum(y):
    """``sum_o window_o(y[o])`` for y of shape (27, C, W, H, D)."""
    _, _, W, H, D = y.shape
    yp = _pad(y)
    out = yp[0, :, 0:W, 0:H, 0:D].copy()
    for o, (i, j, k) in enumerate(_OFFSETS[1:], start=1):
        out += yp[o, :, i:i + W, j:j + H, k:k + D]
    return out


def _shift_sum_adjoint(g):
    """Adjoint of :func:`_shift_sum`: (C, W, H, D) -> (27, C, W, H, D)."""
    c, W, H, D = g.shape
    out = np.empty((27,) + g.shape, dtype=g.dtype)
    for o, (i, j, k) in enumerate(_OFFSETS):
        buf = np.zeros((c, W + 2, H + 2, D + 2), dtype=g.dtype)
        buf[:, i:i + W, j:j + H, k:k + D] = g
        out[o] = _fold(buf)
    return out


# Both layouts below are exact rearrangements of the same sum. Shifting the
# side with fewer channels keeps the 27-fold temporary small.


def conv3d(x, weight, bias):
    """Cross-correlation with a 3x3x3 kernel and replicate padding.

    ``x`` is (C_in, W, H, D), ``weight`` is (C_out, C_in, 3, 3, 3); the output
    keeps the spatial shape.
    """
    _check_conv(x, weight, bias)
    cout, cin = weight.shape[:2]
    spatial = x.shape[1:]
    n = x[0].size
    w = weight.reshape(cout, cin, 27)
    if cin <= cout:
        cols = _windows(x).reshape(27 * cin, n)
        out = w.transpose(0, 2, 1).reshape(cout, 27 * cin) @ cols
        out = out.reshape((cout,) + spatial)
    else:
        y = w.transpose(2, 0, 1).reshape(27 * cout, cin) @ x.reshape(cin, n)
        out = _shift_sum(y.reshape((27, cout) + spatial))
    out += bias.reshape(-1, 1, 1, 1)
    return out


def conv3d_backward(grad_out, x, weight):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv3d`."""
    cout, cin = weight.shape[:2]
    spatial = x.shape[1:]
    n = x[0].size
    w = weight.reshape(cout, cin, 27)
    g = grad_out.reshape(cout, n)
    if cin <= cout:
        cols = _windows(x).reshape(27 * cin, n)
        gw = (g @ cols.T).reshape(cout, 27, cin).transpose(0, 2, 1)
        gcols = w.transpose(0, 2, 1).reshape(cout, 27 * cin).T @ g
        gx = _windows_adjoint(gcols.reshape((27, cin) + spatial))
    else:
        gy = _shift_sum_adjoint(grad_out).reshape(27 * cout, n)
        gw = (gy @ x.reshape(cin, n).T).reshape(27, cout, cin).transpose(1, 2, 0)
        gx = (w.transpose(2, 0, 1).reshape(27 * cout, cin).T @ gy).reshape((cin,) + spatial)
    return gx, np.ascontiguousarray(gw).reshape(weight.shape), g.sum(axis=1)
