"""Volumes, vector fields, normalized grids and MetaImage I/O.

Arrays are indexed ``[x, y, z]`` in memory. On disk the payload is written
x-fastest, which is the MetaImage convention, so reading and writing go
through Fortran-order reshapes and nothing else ever swaps axes.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

INTENSITY_UNITS = ("HU", "normalized", "label")
FIELD_UNITS = ("normalized_offset", "voxel_displacement")

# MetaImage element types we read; the writer only emits the float ones.
_ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
# Keys that carry world-space placement. Accepted and ignored.
_IGNORED_KEYS = {
    "Offset", "Origin", "Position", "TransformMatrix", "Rotation", "Orientation",
    "CenterOfRotation", "AnatomicalOrientation", "Name", "ObjectSubType",
    "ElementMin", "ElementMax", "Modality", "TransformType", "ID", "ParentID",
    "Color", "ElementSize", "BinaryData",
}
_FIELD_UNIT_TAGS = {"voxel": "voxel_displacement", "normalized": "normalized_offset"}


class MetaImageError(ValueError):
    """Raised for MetaImage headers or payloads this reader cannot handle."""


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar image.

    Parameters
    ----------
    data : ndarray of shape (W, H, D)
        Intensities indexed ``[x, y, z]``.
    spacing : tuple of 3 floats
        Voxel size in millimeters.
    intensity_unit : {"HU", "normalized", "label"}
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_unit: str = "HU"

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive sizes, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 strictly positive values, got {self.spacing}")
        if self.intensity_unit not in INTENSITY_UNITS:
            raise ValueError(f"unknown intensity unit {self.intensity_unit!r}")
        if self.intensity_unit == "normalized" and data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("normalized volume has values outside [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class VectorField:
    """Per-voxel 3-vectors, shape (3, W, H, D).

    ``normalized_offset`` values live in the [-1, 1] grid system,
    ``voxel_displacement`` values in voxel index units. Per axis of size S the
    two differ by a factor (S - 1) / 2.
    """

    data: np.ndarray
    unit: str = "voxel_displacement"
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"vector field must have shape (3, W, H, D), got {data.shape}")
        if self.unit not in FIELD_UNITS:
            raise ValueError(f"unknown field unit {self.unit!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape[1:]

    def to_voxel(self):
        if self.unit == "voxel_displacement":
            return self
        scale = _axis_scale(self.shape, self.data.dtype)
        return VectorField(self.data * scale, "voxel_displacement", self.spacing)

    def to_normalized(self):
        if self.unit == "normalized_offset":
            return self
        scale = _axis_scale(self.shape, self.data.dtype)
        safe = np.where(scale > 0, scale, 1)
        return VectorField(np.where(scale > 0, self.data / safe, 0), "normalized_offset", self.spacing)


def _axis_scale(shape, dtype):
    return np.array([(s - 1) / 2 for s in shape], dtype=dtype).reshape(3, 1, 1, 1)


def make_grid(shape, dtype=np.float64):
    """Normalized coordinate mesh of shape (3, W, H, D).

    Voxel ``i`` on an axis of size ``S > 1`` sits at ``-1 + 2 i / (S - 1)``;
    an axis of size 1 sits at 0.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"grid shape must be 3 positive integers, got {shape}")
    axes = [np.linspace(-1.0, 1.0, s) if s > 1 else np.zeros(1) for s in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij")).astype(dtype)


def normalize_intensity(volume, window=(-1000.0, 1000.0)):
    """Map ``window`` linearly onto [0, 1] and clamp."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"degenerate intensity window ({lo}, {hi})")
    data = np.clip((volume.data - lo) / (hi - lo), 0.0, 1.0)
    return Volume(data.astype(volume.data.dtype), volume.spacing, "normalized")


# --------------------------------------------------------------------------
# MetaImage


def _parse_header(lines, path):
    header, tags = {}, {}
    for raw in lines:
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "Comment":
            for token in value.split():
                if "=" in token:
                    k, v = token.split("=", 1)
                    tags[k] = v
            continue
        header[key] = (value, line)
    return header, tags


def _read_header_block(path):
    """Return (header lines, byte offset of payload) for a .mha/.mhd file."""
    lines, offset = [], 0
    with open(path, "rb") as fh:
        for raw in fh:
            offset += len(raw)
            try:
                line = raw.decode("ascii")
            except UnicodeDecodeError as exc:
                raise MetaImageError(f"{path}: header is not ASCII near byte {offset}") from exc
            lines.append(line)
            if line.strip().startswith("ElementDataFile"):
                return lines, offset
    raise MetaImageError(f"{path}: missing ElementDataFile line")


def _bool_value(value):
    return value.strip().lower() in ("true", "1", "yes")


def read_metaimage(path):
    """Read a MetaImage file into ``(array, spacing, tags)``.

    The array has shape (W, H, D) or (C, W, H, D) when the header declares
    ``ElementNumberOfChannels``. ``tags`` holds the ``NCF_*`` comment tags.
    """
    path = Path(path)
    try:
        lines, offset = _read_header_block(path)
    except OSError as exc:
        raise MetaImageError(f"{path}: cannot read file ({exc})") from exc
    header, tags = _parse_header(lines, path)

    def need(key):
        if key not in header:
            raise MetaImageError(f"{path}: missing required header key {key}")
        return header[key]

    value, line = need("ObjectType")
    if value != "Image":
        raise MetaImageError(f"{path}: unsupported header line {line!r}")
    value, line = need("NDims")
    if value != "3":
        raise MetaImageError(f"{path}: unsupported header line {line!r}")
    value, line = need("DimSize")
    try:
        dims = tuple(int(v) for v in value.split())
    except ValueError as exc:
        raise MetaImageError(f"{path}: unsupported header line {line!r}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise MetaImageError(f"{path}: unsupported header line {line!r}")
    spacing = (1.0, 1.0, 1.0)
    if "ElementSpacing" in header:
        value, line = header["ElementSpacing"]
        try:
            spacing = tuple(float(v) for v in value.split())
        except ValueError as exc:
            raise MetaImageError(f"{path}: unsupported header line {line!r}") from exc
        if len(spacing) != 3 or min(spacing) <= 0:
            raise MetaImageError(f"{path}: unsupported header line {line!r}")
    value, line = need("ElementType")
    if value not in _ELEMENT_TYPES:
        raise MetaImageError(f"{path}: unsupported header line {line!r}")
    dtype = _ELEMENT_TYPES[value]
    for key in ("ElementByteOrderMSB", "BinaryDataByteOrderMSB"):
        if key in header and _bool_value(header[key][0]):
            raise MetaImageError(f"{path}: unsupported header line {header[key][1]!r}")
    if "CompressedData" in header and _bool_value(header["CompressedData"][0]):
        raise MetaImageError(f"{path}: unsupported header line {header['CompressedData'][1]!r}")
    if "HeaderSize" in header and header["HeaderSize"][0] not in ("0",):
        raise MetaImageError(f"{path}: unsupported header line {header['HeaderSize'][1]!r}")
    channels = 1
    if "ElementNumberOfChannels" in header:
        value, line = header["ElementNumberOfChannels"]
        if not value.isdigit() or int(value) < 1:
            raise MetaImageError(f"{path}: unsupported header line {line!r}")
        channels = int(value)
    known = {"ObjectType", "NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile",
             "ElementByteOrderMSB", "BinaryDataByteOrderMSB", "CompressedData", "HeaderSize",
             "ElementNumberOfChannels"}
    for key, (_, line) in header.items():
        if key not in known and key not in _IGNORED_KEYS:
            logger.warning("%s: ignoring header line %r", path, line.strip())

    value, line = need("ElementDataFile")
    if value == "LOCAL":
        with open(path, "rb") as fh:
            fh.seek(offset)
            payload = fh.read()
    elif value.upper() == "LIST" or "%" in value:
        raise MetaImageError(f"{path}: unsupported header line {line!r}")
    else:
        try:
            payload = (path.parent / value).read_bytes()
        except OSError as exc:
            raise MetaImageError(f"{path}: cannot read data file from header line {line!r} ({exc})") from exc

    count = channels * dims[0] * dims[1] * dims[2]
    if len(payload) != count * dtype.itemsize:
        dim_line = header["DimSize"][1]
        raise MetaImageError(
            f"{path}: payload holds {len(payload) // dtype.itemsize} elements but header line "
            f"{dim_line!r} needs {count}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    # multi-channel payloads interleave channels per voxel, voxels x-fastest
    shape = dims if channels == 1 else (channels,) + dims
    arr = flat.reshape(shape, order="F")
    return arr, spacing, tags


def write_metaimage(path, array, spacing=(1.0, 1.0, 1.0), tags=None):
    """Write a float array of shape (W, H, D) or (C, W, H, D)."""
    path = Path(path)
    array = np.asarray(array)
    if array.dtype == np.float64:
        etype, out = "MET_DOUBLE", array.astype("<f8")
    else:
        etype, out = "MET_FLOAT", array.astype("<f4")
    channels = 1 if out.ndim == 3 else out.shape[0]
    dims = out.shape[-3:]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing),
        "DimSize = " + " ".join(str(d) for d in dims),
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    if tags:
        lines.append("Comment = " + " ".join(f"{k}={v}" for k, v in tags.items()))
    lines.append(f"ElementType = {etype}")
    payload = out.reshape(-1, order="F").tobytes()
    suffix = path.suffix.lower()
    if suffix == ".mhd":
        raw = path.with_suffix(".raw")
        lines.append(f"ElementDataFile = {raw.name}")
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
        raw.write_bytes(payload)
    elif suffix == ".mha":
        lines.append("ElementDataFile = LOCAL")
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            fh.write(payload)
    else:
        raise ValueError(f"{path}: expected a .mha or .mhd file name")


def load_volume(path):
    """Read a scalar MetaImage volume (.mha or .mhd + .raw)."""
    arr, spacing, tags = read_metaimage(path)
    if arr.ndim != 3:
        raise MetaImageError(f"{path}: expected a scalar image, file has {arr.shape[0]} channels")
    if tags.get("NCF_NORMALIZED") == "1":
        unit = "normalized"
    elif tags.get("NCF_LABEL") == "1":
        unit = "label"
    else:
        unit = "HU"
    data = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    return Volume(data, spacing, unit)


def save_volume(volume, path):
    tags = {}
    if volume.intensity_unit == "normalized":
        tags["NCF_NORMALIZED"] = "1"
    elif volume.intensity_unit == "label":
        tags["NCF_LABEL"] = "1"
    os.makedirs(Path(path).parent or ".", exist_ok=True)
    write_metaimage(path, volume.data, volume.spacing, tags)


def save_field(vf, path):
    unit_tag = "voxel" if vf.unit == "voxel_displacement" else "normalized"
    write_metaimage(path, vf.data, vf.spacing, {"NCF_FIELD_UNIT": unit_tag})


def load_field(path):
    arr, spacing, tags = read_metaimage(path)
    channels = 1 if arr.ndim == 3 else arr.shape[0]
    if channels != 3:
        raise MetaImageError(f"{path}: a displacement field needs 3 channels, file has {channels}")
    if "NCF_FIELD_UNIT" not in tags:
        raise MetaImageError(f"{path}: missing NCF_FIELD_UNIT comment tag")
    if tags["NCF_FIELD_UNIT"] not in _FIELD_UNIT_TAGS:
        raise MetaImageError(f"{path}: unknown field unit tag {tags['NCF_FIELD_UNIT']!r}")
    data = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    return VectorField(data, _FIELD_UNIT_TAGS[tags["NCF_FIELD_UNIT"]], spacing)
