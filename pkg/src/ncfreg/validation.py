"""Input checks shared by the estimator and the command line."""

import numpy as np

from .volume import Volume, VectorField


def check_volume(X, name="image", intensity_unit=None):
    """Return ``X`` as a :class:`Volume`.

    Plain arrays carry no unit. Unless ``intensity_unit`` says otherwise they
    are taken as ``normalized`` when every value lies in [0, 1] and as ``HU``
    otherwise.
    """
    if isinstance(X, Volume):
        return X
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3D array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if intensity_unit is None:
        intensity_unit = "normalized" if arr.size and arr.min() >= 0 and arr.max() <= 1 else "HU"
    return Volume(arr, intensity_unit=intensity_unit)


def check_pair(fixed, moving):
    fixed = check_volume(fixed, "fixed")
    moving = check_volume(moving, "moving")
    if fixed.shape != moving.shape:
        raise ValueError(
            f"fixed and moving images must share a shape (resample beforehand), "
            f"got {fixed.shape} and {moving.shape}"
        )
    return fixed, moving


def check_field(field, shape=None):
    if not isinstance(field, VectorField):
        arr = np.asarray(field)
        field = VectorField(arr, "voxel_displacement")
    if shape is not None and tuple(field.shape) != tuple(shape):
        raise ValueError(f"field shape {field.shape} does not match image shape {tuple(shape)}")
    return field
