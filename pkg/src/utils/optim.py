"""
Adam optimizer and learning-rate schedule for tape-trained parameters.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from src.utils.errors import ShapeError


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name, plus the step count."""
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, gradients, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params (dict): name -> Tensor
        gradients (dict): name -> ndarray, same shapes as the params
        state (AdamState): moment estimates, updated in place
        lr (float): learning rate (> 0)
        betas (tuple): exponential decay rates of the two moments
        eps (float): denominator floor

    Returns:
        tuple: (params, state)
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.t += 1
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        grad = np.asarray(gradients.get(name, np.zeros_like(tensor.data)))
        if grad.shape != tensor.shape:
            raise ShapeError("adam_step", tensor.shape, grad.shape, detail=name)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
        tensor.data = (tensor.data - step).astype(tensor.dtype, copy=False)
    return params, state


def cosine_lr(base_lr, step, total_steps, min_lr=0.0):
    """Cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`."""
    if total_steps <= 0:
        return base_lr
    progress = min(max(step / total_steps, 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
