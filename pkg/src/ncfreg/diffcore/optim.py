import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, **kwargs):
        return cls(np.zeros_like(param), np.zeros_like(param), **kwargs)


def adam_step(param, grad, state, lr, name="param"):
    """One bias-corrected Adam update, applied to ``param`` in place.

    Returns ``(param, state)``. Raises ``FloatingPointError`` naming the
    parameter when the gradient holds NaN or infinity.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"{name}: gradient shape {grad.shape} does not match parameter {param.shape}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return param, state


def cosine_lr(step, total, lr0=1e-3, lr1=1e-6):
    """Cosine annealing from ``lr0`` at step 0 to ``lr1`` at ``step == total``."""
    if total < 1 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total >= 1, got step={step}, total={total}")
    w = 0.5 * (1 + math.cos(math.pi * step / total))
    # convex combination keeps both endpoints exact
    return lr0 * w + lr1 * (1 - w)
