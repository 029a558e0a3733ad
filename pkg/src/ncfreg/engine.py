"""Per-pair optimization of the correspondence network, plus warping and field I/O."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .diffcore import adam_step, cosine_lr, trilinear_sample, trilinear_sample_backward
from .losses import LossWeights, SSIMParams, total_loss
from .model import ModelConfig, count_params, init_params, ncf_forward, ncf_backward
from .volume import Volume, VectorField, load_field, make_grid, normalize_intensity, save_field

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "total", "photometric", "ssim", "occupancy")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, breakdown):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 300
    lr0: float = 1e-3
    lr1: float = 1e-6
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    hidden_width: int = 128
    sm_channels: int = 16
    activation_slope: float = 0.01
    fourier_features: int = 0
    seed: int = 0
    hu_window: tuple = (-1000.0, 1000.0)
    ssim_window: int = 7
    ssim_sigma: float = 1.5
    deterministic: bool = False
    log_every: int = 50
    precision: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr0 >= self.lr1 > 0:
            raise ValueError(f"need lr0 >= lr1 > 0, got lr0={self.lr0}, lr1={self.lr1}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if self.log_every < 0:
            raise ValueError("log_every must be >= 0")
        object.__setattr__(self, "hu_window", tuple(float(v) for v in self.hu_window))
        # validate the derived sub-configs eagerly
        self.weights, self.model_config  # noqa: B018

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def model_config(self):
        return ModelConfig(self.hidden_width, self.sm_channels, self.activation_slope, self.fourier_features)

    @property
    def ssim(self):
        return SSIMParams(window=self.ssim_window, sigma=self.ssim_sigma)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def from_dict(cls, values):
        """Build a config, warning about (and dropping) unknown keys."""
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            warnings.warn(f"ignoring unknown config keys: {', '.join(unknown)}", stacklevel=2)
        return cls(**{k: v for k, v in values.items() if k in names})

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
        if not isinstance(values, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(values)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hu_window"] = list(self.hu_window)
        return d


@dataclass
class RegistrationResult:
    offset: VectorField
    warped: Volume
    loss_history: list
    final_lr: float
    wall_time: float
    n_params: int = 0
    params: object = field(default=None, repr=False)

    @property
    def initial_loss(self):
        return self.loss_history[0]["total"]

    @property
    def final_loss(self):
        return self.loss_history[-1]["total"]

    def mean_offset(self):
        """Mean displacement magnitude in voxels."""
        return float(np.mean(np.linalg.norm(self.offset.data, axis=0)))


def prepare_intensities(fixed, moving, hu_window=(-1000.0, 1000.0)):
    """Map both images to [0, 1] with one shared window.

    HU images use the fixed CT window; anything else uses the min/max of the
    fixed image.
    """
    if fixed.intensity_unit == "HU":
        window = hu_window
    else:
        lo, hi = float(fixed.data.min()), float(fixed.data.max())
        if not lo < hi:
            raise ValueError("fixed image is constant; cannot normalize intensities")
        window = (lo, hi)
    return normalize_intensity(fixed, window), normalize_intensity(moving, window)


@contextlib.contextmanager
def _thread_scope(deterministic):
    if deterministic:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def objective(params, grid, fixed, moving, weights=LossWeights(), ssim=SSIMParams(), grad=False):
    """Loss of one full-volume forward pass, optionally with parameter gradients.

    ``fixed`` and ``moving`` are normalized intensity arrays. Returns the
    :class:`~ncfreg.losses.LossBreakdown`, or ``(breakdown, grads)`` with
    ``grads`` keyed like ``params.arrays``.
    """
    _, phi, cache = ncf_forward(params, grid)
    warped = trilinear_sample(moving, phi)
    if not grad:
        return total_loss(fixed, warped, phi, weights, ssim, moving_shape=moving.shape)
    breakdown, g_warped, g_phi = total_loss(fixed, warped, phi, weights, ssim, grad=True,
                                            moving_shape=moving.shape)
    _, g_sample = trilinear_sample_backward(g_warped, moving, phi, volume_grad=False)
    return breakdown, ncf_backward(params, cache, g_phi + g_sample)


def register_pair(fixed, moving, config=None, callback=None):
    """Fit a fresh network to one image pair.

    Parameters
    ----------
    fixed, moving : Volume
        Images of identical shape.
    config : RunConfig, optional
    callback : callable, optional
        Called as ``callback(step, record)`` after every step.

    Returns
    -------
    RegistrationResult
        ``offset`` is in voxel units and maps fixed-grid voxels into the
        moving image; ``warped`` is the moving image (original intensities)
        resampled through it.
    """
    config = config or RunConfig()
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed and moving shapes differ: {fixed.shape} vs {moving.shape}")
    dt = config.dtype
    f_norm, m_norm = prepare_intensities(fixed, moving, config.hu_window)
    f = f_norm.data.astype(dt)
    m = m_norm.data.astype(dt)
    weights, ssim = config.weights, config.ssim

    start = time.perf_counter()
    history = []
    with _thread_scope(config.deterministic):
        grid = make_grid(fixed.shape, dt)
        params = init_params(config.model_config, config.seed, dt)
        lr = config.lr0
        for step in range(config.iterations):
            lr = cosine_lr(step, config.iterations, config.lr0, config.lr1)
            breakdown, grads = objective(params, grid, f, m, weights, ssim, grad=True)
            record = {"step": step, "lr": lr, **breakdown.as_dict()}
            if not all(math.isfinite(v) for v in breakdown.as_dict().values()):
                raise NonFiniteLossError(step, breakdown)
            history.append(record)
            if config.log_every and (step % config.log_every == 0 or step == config.iterations - 1):
                logger.info("step %d lr %.3g total %.5f (photo %.5f ssim %.5f occ %.4f)",
                            step, lr, breakdown.total, breakdown.photometric,
                            breakdown.ssim, breakdown.occupancy)
            if callback is not None:
                callback(step, record)
            for name, arr in params.arrays.items():
                adam_step(arr, grads[name], params.adam[name], lr, name)
        offset, _, _ = ncf_forward(params, grid)

    field_norm = VectorField(offset, "normalized_offset", fixed.spacing)
    vf = field_norm.to_voxel()
    warped_vol = warp_image(moving, vf, "linear")
    return RegistrationResult(
        offset=vf,
        warped=warped_vol,
        loss_history=history,
        final_lr=lr,
        wall_time=time.perf_counter() - start,
        n_params=count_params(config.model_config),
        params=params,
    )


def _index_coords(offset):
    shape = offset.shape
    idx = np.indices(shape, dtype=offset.data.dtype)
    return idx + offset.data


def warp_image(moving, offset, interp="linear"):
    """Resample ``moving`` at ``x + offset(x)`` for every voxel ``x``.

    ``nearest`` rounds to the closest voxel (ties go to the lower index) and
    keeps label values intact.
    """
    offset = offset.to_voxel()
    if offset.shape != moving.shape:
        raise ValueError(f"field shape {offset.shape} does not match image shape {moving.shape}")
    coords = _index_coords(offset)
    if interp == "linear":
        data = trilinear_sample(moving.data, coords, normalized=False)
    elif interp == "nearest":
        idx = [np.clip(np.ceil(coords[a] - 0.5), 0, s - 1).astype(np.intp)
               for a, s in enumerate(moving.shape)]
        data = moving.data[idx[0], idx[1], idx[2]]
    else:
        raise ValueError(f"interp must be 'linear' or 'nearest', got {interp!r}")
    return Volume(data.astype(moving.data.dtype), moving.spacing, moving.intensity_unit)


def export_field(offset, path):
    save_field(offset, path)


def import_field(path):
    return load_field(path)


def write_loss_log(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for rec in history:
            writer.writerow([rec["step"]] + [repr(float(rec[c])) for c in LOG_COLUMNS[1:]])
