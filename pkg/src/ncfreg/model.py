"""The correspondence network: a pointwise coordinate MLP followed by a small
residual 3D CNN that smooths the offset field it produces.

Parameters are kept in a plain ``dict`` of arrays keyed by layer name, in a
fixed order. Forward passes return a cache that the matching backward pass
consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    AdamState,
    conv3d,
    conv3d_backward,
    leaky_relu,
    leaky_relu_backward,
    linear,
    linear_backward,
)

CCM_LAYERS = 5


@dataclass(frozen=True)
class ModelConfig:
    hidden_width: int = 128
    sm_channels: int = 16
    activation_slope: float = 0.01
    # number of sin/cos frequency bands appended to raw coordinates; 0 = off
    fourier_features: int = 0

    def __post_init__(self):
        if self.hidden_width < 1 or self.sm_channels < 1:
            raise ValueError("hidden_width and sm_channels must be >= 1")
        if not 0 <= self.activation_slope < 1:
            raise ValueError("activation_slope must lie in [0, 1)")
        if self.fourier_features < 0:
            raise ValueError("fourier_features must be >= 0")

    @property
    def input_dim(self):
        return 3 + 6 * self.fourier_features


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict
    adam: dict = field(default_factory=dict)

    def n_params(self):
        return sum(a.size for a in self.arrays.values())


def _layer_shapes(config):
    h, c = config.hidden_width, config.sm_channels
    dims = [config.input_dim, h, h, h, h, 3]
    shapes = {}
    for i in range(CCM_LAYERS):
        shapes[f"ccm.{i}.weight"] = (dims[i + 1], dims[i])
        shapes[f"ccm.{i}.bias"] = (dims[i + 1],)
    shapes["sm.0.weight"] = (c, 3, 3, 3, 3)
    shapes["sm.0.bias"] = (c,)
    shapes["sm.1.weight"] = (3, c, 3, 3, 3)
    shapes["sm.1.bias"] = (3,)
    return shapes


def count_params(config=None):
    """Exact number of trainable scalars for ``config``."""
    config = config or ModelConfig()
    h, c, d = config.hidden_width, config.sm_channels, config.input_dim
    ccm = (d * h + h) + 3 * (h * h + h) + (3 * h + 3)
    sm = (3 * c * 27 + c) + (c * 3 * 27 + 3)
    return ccm + sm


def init_params(config=None, seed=0, dtype=np.float32):
    """Uniform fan-in initialization; the last layer of each module is zero.

    With both output layers at zero the network starts as the identity
    transform. Values are drawn in float64 and cast, so the same seed yields
    the same weights at every precision.
    """
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    zero = {f"ccm.{CCM_LAYERS - 1}.weight", f"ccm.{CCM_LAYERS - 1}.bias", "sm.1.weight", "sm.1.bias"}
    arrays = {}
    shapes = _layer_shapes(config)
    for name, shape in shapes.items():
        if name in zero:
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        wshape = shapes[name.replace(".bias", ".weight")]
        fan_in = int(np.prod(wshape[1:]))
        bound = np.sqrt(1.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    adam = {name: AdamState.like(a) for name, a in arrays.items()}
    return ModelParams(config, arrays, adam)


def encode_coordinates(coords, n_bands):
    """Raw coordinates, optionally followed by sin/cos features."""
    if n_bands == 0:
        return coords
    feats = [coords]
    for k in range(n_bands):
        arg = (np.pi * 2.0 ** k) * coords
        feats.extend([np.sin(arg), np.cos(arg)])
    return np.concatenate(feats, axis=1)


def ccm_forward(params, coords):
    """Coarse offsets (N, 3) for normalized coordinates (N, 3)."""
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"CCM expects coordinates of shape (N, 3), got {coords.shape}")
    cfg, p = params.config, params.arrays
    h = encode_coordinates(coords, cfg.fourier_features)
    cache = []
    for i in range(CCM_LAYERS):
        z = linear(h, p[f"ccm.{i}.weight"], p[f"ccm.{i}.bias"])
        cache.append((h, z if i < CCM_LAYERS - 1 else None))
        h = leaky_relu(z, cfg.activation_slope) if i < CCM_LAYERS - 1 else z
    return h, cache


def ccm_backward(params, cache, grad_out, grads):
    slope, p = params.config.activation_slope, params.arrays
    g = grad_out
    for i in reversed(range(CCM_LAYERS)):
        h, z = cache[i]
        if z is not None:
            g = leaky_relu_backward(g, z, slope)
        gx, grads[f"ccm.{i}.weight"], grads[f"ccm.{i}.bias"] = linear_backward(g, h, p[f"ccm.{i}.weight"])
        g = gx
    return grads


def sm_forward(params, coarse):
    """Residual smoothing: ``coarse + conv(leaky_relu(conv(coarse)))``."""
    if coarse.ndim != 4 or coarse.shape[0] != 3:
        raise ValueError(f"SM expects a (3, W, H, D) field, got {coarse.shape}")
    p, slope = params.arrays, params.config.activation_slope
    z = conv3d(coarse, p["sm.0.weight"], p["sm.0.bias"])
    a = leaky_relu(z, slope)
    out = coarse + conv3d(a, p["sm.1.weight"], p["sm.1.bias"])
    return out, (coarse, z, a)


def sm_backward(params, cache, grad_out, grads):
    p, slope = params.arrays, params.config.activation_slope
    coarse, z, a = cache
    ga, grads["sm.1.weight"], grads["sm.1.bias"] = conv3d_backward(grad_out, a, p["sm.1.weight"])
    gz = leaky_relu_backward(ga, z, slope)
    gc, grads["sm.0.weight"], grads["sm.0.bias"] = conv3d_backward(gz, coarse, p["sm.0.weight"])
    return grad_out + gc, grads


def ncf_forward(params, grid):
    """Return ``(offset, phi, cache)`` for a (3, W, H, D) grid.

    ``offset`` is in normalized units; ``phi = grid + offset`` is not clamped.
    """
    shape = grid.shape[1:]
    coords = np.ascontiguousarray(grid.reshape(3, -1).T)
    coarse, ccm_cache = ccm_forward(params, coords)
    coarse = np.ascontiguousarray(coarse.T).reshape((3,) + shape)
    offset, sm_cache = sm_forward(params, coarse)
    return offset, grid + offset, (ccm_cache, sm_cache)


def ncf_backward(params, cache, grad_offset):
    """Gradients of all parameters given d(loss)/d(offset)."""
    ccm_cache, sm_cache = cache
    grads = {}
    g_coarse, grads = sm_backward(params, sm_cache, grad_offset, grads)
    g = np.ascontiguousarray(g_coarse.reshape(3, -1).T)
    ccm_backward(params, ccm_cache, g, grads)
    return {name: grads[name] for name in params.arrays}
