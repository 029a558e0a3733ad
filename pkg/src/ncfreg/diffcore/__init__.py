"""Differentiable kernels used by the registration model.

Every kernel is a pair of plain functions: a forward pass and a backward pass
that maps the upstream gradient to gradients of the inputs. The model chains
them in a fixed order, so there is no tape.
"""

from .layers import conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, linear, linear_backward
from .optim import AdamState, adam_step, cosine_lr
from .sampling import (
    trilinear_sample,
    trilinear_sample_backward,
    trilinear_splat,
    trilinear_splat_backward,
)
from .ssim import gaussian_window, ssim_map, ssim_map_backward

__all__ = [
    "AdamState",
    "adam_step",
    "conv3d",
    "conv3d_backward",
    "cosine_lr",
    "gaussian_window",
    "leaky_relu",
    "leaky_relu_backward",
    "linear",
    "linear_backward",
    "ssim_map",
    "ssim_map_backward",
    "trilinear_sample",
    "trilinear_sample_backward",
    "trilinear_splat",
    "trilinear_splat_backward",
]
