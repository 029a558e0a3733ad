"""Trilinear sampling and splatting with exact coordinate gradients.

Coordinates are clamped to the volume before interpolation, so points
outside the volume read (or deposit onto) the border and receive a zero
coordinate gradient along the clamped axis. At an interior integer position
the interpolant has a kink; there the coordinate gradient is the mean of the
two one-sided slopes, i.e. the central difference of the image.
"""

import numpy as np


class _Stencil:
    """Corner indices and weights of a set of points, shared by all kernels."""

    def __init__(self, coords, shape, normalized=True):
        shape = tuple(int(s) for s in shape)
        pts = coords.reshape(3, -1)
        dtype = np.result_type(coords.dtype, np.float32)
        eps = np.finfo(dtype).eps
        self.shape = shape
        self.base, self.frac, self.scale, self.kink = [], [], [], []
        for a, size in enumerate(shape):
            c = pts[a].astype(dtype, copy=False)
            if normalized:
                scale = dtype.type((size - 1) / 2)
                x = (c + 1) * scale
            else:
                scale = dtype.type(1)
                x = c
            inside = (x >= 0) & (x <= size - 1)
            x = np.clip(x, 0, size - 1)
            # snap points that sit within rounding distance of a voxel center
            r = np.rint(x)
            x = np.where(np.abs(x - r) <= 4 * eps * max(size - 1, 1), r, x)
            if size > 1:
                b = np.minimum(np.floor(x), size - 2).astype(np.intp)
            else:
                b = np.zeros(x.shape, dtype=np.intp)
            f = (x - b).astype(dtype)
            self.base.append(b)
            self.frac.append(f)
            self.scale.append(np.where(inside, scale, 0).astype(dtype))
            self.kink.append(np.flatnonzero((f == 0) & (b > 0)))

    def _index(self, bx, by, bz):
        _, H, D = self.shape
        return (bx * H + by) * D + bz

    def _corners(self, base=None):
        """Yield ``(flat_index, weight)`` for the 8 corners."""
        base = self.base if base is None else base
        W = self.shape
        upper = [np.minimum(b + 1, s - 1) for b, s in zip(base, W)]
        wts = [(1 - f, f) for f in self.frac]
        for dx in (0, 1):
            ix = upper[0] if dx else base[0]
            for dy in (0, 1):
                iy = upper[1] if dy else base[1]
                for dz in (0, 1):
                    iz = upper[2] if dz else base[2]
                    yield self._index(ix, iy, iz), wts[0][dx] * wts[1][dy] * wts[2][dz]

    def gather(self, volume):
        flat = volume.reshape(-1)
        out = None
        for idx, w in self._corners():
            term = flat[idx] * w
            out = term if out is None else out + term
        return out

    def scatter(self, values):
        n = int(np.prod(self.shape))
        out = np.zeros(n, dtype=np.result_type(values, self.frac[0]))
        for idx, w in self._corners():
            out += np.bincount(idx, weights=values * w, minlength=n).astype(out.dtype, copy=False)
        return out.reshape(self.shape)

    def _axis_slope(self, flat, axis, sel=None, shift=0):
        """d(interpolant)/d(index coordinate) along ``axis`` at the selected points."""
        base = [b if sel is None else b[sel] for b in self.base]
        frac = [f if sel is None else f[sel] for f in self.frac]
        base[axis] = base[axis] - shift
        hi = [np.minimum(b + 1, s - 1) for b, s in zip(base, self.shape)]
        slope = 0
        others = [a for a in range(3) if a != axis]
        for do in ((0, 0), (0, 1), (1, 0), (1, 1)):
            w = 1
            idx_lo, idx_hi = list(base), list(base)
            for a, bit in zip(others, do):
                w = w * (frac[a] if bit else 1 - frac[a])
                pick = hi[a] if bit else base[a]
                idx_lo[a] = pick
                idx_hi[a] = pick
            idx_hi[axis] = hi[axis]
            slope = slope + w * (flat[self._index(*idx_hi)] - flat[self._index(*idx_lo)])
        return slope

    def slopes(self, volume):
        """Coordinate gradient of the interpolant, shape (3, P), chain rule applied."""
        flat = volume.reshape(-1)
        out = []
        for a in range(3):
            s = self._axis_slope(flat, a)
            k = self.kink[a]
            if k.size:
                left = self._axis_slope(flat, a, sel=k, shift=1)
                s[k] = 0.5 * (s[k] + left)
            out.append(s * self.scale[a])
        return np.stack(out)


def _check_coords(coords):
    if coords.ndim < 2 or coords.shape[0] != 3:
        raise ValueError(f"coordinates must have shape (3, ...), got {coords.shape}")


def trilinear_sample(volume, coords, normalized=True):
    """Interpolate ``volume`` (W, H, D) at ``coords`` (3, ...).

    With ``normalized=True`` coordinates follow :func:`ncfreg.volume.make_grid`;
    otherwise they are continuous voxel indices.
    """
    _check_coords(coords)
    st = _Stencil(coords, volume.shape, normalized)
    return st.gather(volume).reshape(coords.shape[1:])


def trilinear_sample_backward(grad_out, volume, coords, normalized=True, volume_grad=True):
    """Return ``(grad_volume, grad_coords)`` for :func:`trilinear_sample`.

    ``grad_volume`` is None when ``volume_grad`` is False.
    """
    st = _Stencil(coords, volume.shape, normalized)
    g = grad_out.reshape(-1)
    grad_volume = st.scatter(g) if volume_grad else None
    grad_coords = (st.slopes(volume) * g).reshape(coords.shape)
    return grad_volume, grad_coords


def trilinear_splat(coords, target_shape, normalized=True):
    """Deposit unit mass per point onto a zero volume of ``target_shape``."""
    _check_coords(coords)
    st = _Stencil(coords, target_shape, normalized)
    ones = np.ones(st.frac[0].shape, dtype=st.frac[0].dtype)
    return st.scatter(ones)


def trilinear_splat_backward(grad_out, coords, normalized=True):
    """Gradient w.r.t. ``coords`` of ``sum(grad_out * trilinear_splat(coords))``."""
    st = _Stencil(coords, grad_out.shape, normalized)
    return st.slopes(grad_out).reshape(coords.shape)
