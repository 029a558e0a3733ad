"""Registration quality metrics and a synthetic benchmark with known ground truth."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import trilinear_sample
from .volume import Volume, VectorField, load_field, load_volume, save_field, save_volume


def _array(x):
    return x.data if isinstance(x, (Volume, VectorField)) else np.asarray(x)


def dice(a, b):
    """Dice overlap of two binary masks; two empty masks score 1."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise ValueError("dice expects binary masks with values in {0, 1}")
    a, b = a.astype(bool), b.astype(bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def endpoint_error(pred, gt, mask=None):
    """Mean and max Euclidean distance between two voxel-unit fields."""
    if pred.unit != "voxel_displacement" or gt.unit != "voxel_displacement":
        raise ValueError(f"endpoint_error needs voxel_displacement fields, got {pred.unit} and {gt.unit}")
    if pred.shape != gt.shape:
        raise ValueError(f"field shapes differ: {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred.data.astype(np.float64) - gt.data, axis=0)
    if mask is not None:
        sel = _array(mask).astype(bool)
        if sel.shape != err.shape:
            raise ValueError(f"mask shape {sel.shape} does not match field shape {err.shape}")
        err = err[sel]
    if err.size == 0:
        return 0.0, 0.0
    return float(err.mean()), float(err.max())


def jacobian_determinant(offset):
    """Determinant of the Jacobian of ``x + u(x)`` at interior voxels.

    Derivatives are central differences, so the result has shape
    (W - 2, H - 2, D - 2).
    """
    u = offset.to_voxel().data.astype(np.float64)
    if min(u.shape[1:]) < 3:
        raise ValueError(f"jacobian needs every axis >= 3 voxels, got {u.shape[1:]}")
    J = np.empty((3, 3) + tuple(s - 2 for s in u.shape[1:]))
    for i in range(3):
        for j in range(3):
            d = np.gradient(u[i], axis=j)[1:-1, 1:-1, 1:-1]
            J[i, j] = d + (1.0 if i == j else 0.0)
    return np.linalg.det(np.moveaxis(J, (0, 1), (-2, -1)))


def jacobian_folding(offset):
    """Fraction of interior voxels whose Jacobian determinant is <= 0."""
    det = jacobian_determinant(offset)
    return float(np.mean(det <= 0))


def tre(landmarks, offset, spacing=None):
    """Mean target registration error in millimeters.

    ``landmarks`` is an (n, 6) array of ``fx fy fz mx my mz`` rows in voxel
    coordinates. Each fixed point is carried by the interpolated offset and
    compared with its moving partner.
    """
    lm = np.asarray(landmarks, dtype=np.float64).reshape(-1, 6)
    u = offset.to_voxel()
    spacing = np.asarray(offset.spacing if spacing is None else spacing, dtype=np.float64)
    shape = np.array(u.shape)
    fixed_pts, moving_pts = lm[:, :3], lm[:, 3:]
    if lm.size and ((fixed_pts < 0).any() or (fixed_pts > shape - 1).any()):
        raise ValueError("landmark outside the field domain")
    if lm.size == 0:
        return 0.0
    coords = fixed_pts.T.reshape(3, -1, 1, 1)
    disp = np.stack([
        trilinear_sample(u.data[a].astype(np.float64), coords, normalized=False).ravel()
        for a in range(3)
    ], axis=1)
    residual = (fixed_pts + disp - moving_pts) * spacing
    return float(np.linalg.norm(residual, axis=1).mean())


def read_landmarks(path):
    rows = np.loadtxt(path, ndmin=2)
    if rows.size and rows.shape[1] != 6:
        raise ValueError(f"{path}: expected 6 columns per landmark line, got {rows.shape[1]}")
    return rows.reshape(-1, 6)


def write_landmarks(landmarks, path):
    np.savetxt(path, np.asarray(landmarks).reshape(-1, 6), fmt="%.6f")


# --------------------------------------------------------------------------
# synthetic cases


@dataclass
class SyntheticCase:
    fixed: Volume
    moving: Volume
    fixed_mask: Volume
    moving_mask: Volume
    gt_field: VectorField
    seed: int
    max_disp: float
    landmarks: np.ndarray
    pre_dice: float
    gt_folding: float


class _Phantom:
    """Smooth blobs plus a soft-edged ellipsoid, evaluated at arbitrary points."""

    def __init__(self, rng, size):
        size = np.asarray(size, dtype=np.float64)
        n = int(rng.integers(3, 7))
        self.bumps = [
            (rng.uniform(0.2, 0.8, 3) * (size - 1), rng.uniform(0.08, 0.2, 3) * size, rng.uniform(0.3, 0.7))
            for _ in range(n)
        ]
        self.center = (size - 1) / 2 + rng.uniform(-0.08, 0.08, 3) * size
        self.radii = rng.uniform(0.18, 0.26, 3) * size

    def mask(self, pts):
        q = (((pts - self.center) / self.radii) ** 2).sum(-1)
        return q <= 1.0

    def intensity(self, pts):
        val = np.zeros(pts.shape[:-1])
        for c, s, amp in self.bumps:
            val += amp * np.exp(-0.5 * (((pts - c) / s) ** 2).sum(-1))
        q = np.sqrt((((pts - self.center) / self.radii) ** 2).sum(-1))
        edge = 1.0 / (1.0 + np.exp(-(1.0 - q) * self.radii.mean()))
        return 0.2 + 0.3 * edge + 0.5 * val


class _RBFWarp:
    """Sum of Gaussian radial displacements ``w(p) = sum_k a_k exp(-|p-c_k|^2 / 2 s_k^2)``."""

    def __init__(self, centers, sigmas, amps):
        self.centers, self.sigmas, self.amps = centers, sigmas, amps

    def __call__(self, pts):
        out = np.zeros_like(pts)
        for c, s, a in zip(self.centers, self.sigmas, self.amps):
            out += np.exp(-0.5 * ((pts - c) ** 2).sum(-1) / s ** 2)[..., None] * a
        return out

    def inverse_displacement(self, pts, iters=200, tol=1e-12):
        """``u`` with ``p + u + w(p + u) = p``, by fixed-point iteration.

        Converges because every bump keeps ``|a| <= 0.4 s``, which bounds the
        Lipschitz constant of ``w`` below 1.
        """
        u = np.zeros_like(pts)
        for _ in range(iters):
            nxt = -self(pts + u)
            if np.abs(nxt - u).max() < tol:
                return nxt
            u = nxt
        return u


def gen_synthetic_case(size=(48, 48, 48), seed=0, max_disp=4.0, n_bumps=4, n_landmarks=16):
    """Phantom pair with an analytic, fold-free ground-truth field.

    The moving image is the phantom pulled back through a smooth RBF warp
    ``w``; the ground truth is the inverse displacement ``u`` of that warp,
    so ``moving(x + u(x)) == fixed(x)``. The RBF amplitudes are scaled so
    the peak of ``|w|`` equals ``max_disp`` voxels.
    """
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ValueError(f"synthetic cases need at least 16 voxels per axis, got {size}")
    if max_disp < 0:
        raise ValueError("max_disp must be >= 0")
    rng = np.random.default_rng(seed)
    phantom = _Phantom(rng, size)
    extent = np.asarray(size, dtype=np.float64)

    # bumps near the ellipsoid, pushing mostly one way so the masks separate
    main = rng.normal(size=3)
    main /= np.linalg.norm(main)
    centers = [phantom.center + rng.uniform(-0.15, 0.15, 3) * extent for _ in range(n_bumps)]
    sigmas = [float(rng.uniform(0.25, 0.4) * extent.mean()) for _ in range(n_bumps)]
    dirs = []
    for _ in range(n_bumps):
        d = main + 0.5 * rng.normal(size=3)
        dirs.append(d / np.linalg.norm(d))
    pts = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing="ij"), axis=-1)
    unit = _RBFWarp(centers, sigmas, np.array(dirs))
    peak = np.linalg.norm(unit(pts), axis=-1).max()
    amps = np.array(dirs) * (max_disp / peak)
    for a, s in zip(amps, sigmas):
        if np.linalg.norm(a) > 0.4 * s:
            raise ValueError(
                f"max_disp={max_disp} needs a bump amplitude {np.linalg.norm(a):.2f} above the "
                f"fold-free bound 0.4*sigma = {0.4 * s:.2f}"
            )
    warp = _RBFWarp(centers, sigmas, amps)

    w = warp(pts)
    fixed_img = phantom.intensity(pts)
    moving_img = phantom.intensity(pts + w)
    lo, hi = fixed_img.min(), fixed_img.max()
    fixed_img = (fixed_img - lo) / (hi - lo)
    moving_img = np.clip((moving_img - lo) / (hi - lo), 0.0, 1.0)
    fixed_mask = phantom.mask(pts)
    moving_mask = phantom.mask(pts + w)
    u = warp.inverse_displacement(pts)

    gt = VectorField(np.moveaxis(u, -1, 0).astype(np.float32), "voxel_displacement")
    folding = jacobian_folding(gt)
    if folding != 0:
        raise RuntimeError(f"generated field folds ({folding:.4f} of voxels); generator bound violated")

    inside = np.argwhere(fixed_mask)
    pick = inside[rng.choice(len(inside), size=min(n_landmarks, len(inside)), replace=False)]
    fpts = pick.astype(np.float64)
    mpts = fpts + warp.inverse_displacement(fpts)
    landmarks = np.hstack([fpts, mpts])

    return SyntheticCase(
        fixed=Volume(fixed_img.astype(np.float32), intensity_unit="normalized"),
        moving=Volume(moving_img.astype(np.float32), intensity_unit="normalized"),
        fixed_mask=Volume(fixed_mask.astype(np.float32), intensity_unit="label"),
        moving_mask=Volume(moving_mask.astype(np.float32), intensity_unit="label"),
        gt_field=gt,
        seed=seed,
        max_disp=float(max_disp),
        landmarks=landmarks,
        pre_dice=dice(fixed_mask, moving_mask),
        gt_folding=folding,
    )


_CASE_FILES = {
    "fixed": "fixed.mha",
    "moving": "moving.mha",
    "fixed_mask": "fixed_mask.mha",
    "moving_mask": "moving_mask.mha",
    "gt_field": "gt_field.mha",
    "landmarks": "landmarks.txt",
}


def _checksum(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def write_synthetic_case(case, out_dir):
    """Write the case as MetaImage files plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for role in ("fixed", "moving", "fixed_mask", "moving_mask"):
        save_volume(getattr(case, role), out / _CASE_FILES[role])
    save_field(case.gt_field, out / _CASE_FILES["gt_field"])
    write_landmarks(case.landmarks, out / _CASE_FILES["landmarks"])
    manifest = {
        "seed": int(case.seed),
        "max_disp": case.max_disp,
        "size": list(case.fixed.shape),
        "files": dict(_CASE_FILES),
        "checksums": {
            role: _checksum(getattr(case, role).data)
            for role in ("fixed", "moving", "fixed_mask", "moving_mask", "gt_field")
        },
        "pre_dice": case.pre_dice,
        "gt_folding": case.gt_folding,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_synthetic_case(case_dir):
    d = Path(case_dir)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    files = manifest["files"]
    return SyntheticCase(
        fixed=load_volume(d / files["fixed"]),
        moving=load_volume(d / files["moving"]),
        fixed_mask=load_volume(d / files["fixed_mask"]),
        moving_mask=load_volume(d / files["moving_mask"]),
        gt_field=load_field(d / files["gt_field"]),
        seed=manifest["seed"],
        max_disp=manifest["max_disp"],
        landmarks=read_landmarks(d / files["landmarks"]),
        pre_dice=manifest["pre_dice"],
        gt_folding=manifest["gt_folding"],
    )
