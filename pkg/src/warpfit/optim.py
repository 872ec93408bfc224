"""Adam optimizer with bias correction and inverse-time learning-rate decay.

The step applies lr_t = lr / (1 + lr_decay * t) where t counts completed
steps before this one, and couples L2 regularization by adding
2 * decay * w to the raw gradient. A non-finite gradient aborts the step
before any parameter is touched, naming the offending parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, TrainingError
from .tensor import Tensor

ADAM_EPS = 1e-8


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    lr_decay: float = 0.0
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"learning rate must be non-negative, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_decay < 0:
            raise ParameterError(f"lr_decay must be non-negative, got {self.lr_decay}")


def adam_step(params: dict[str, Tensor], state: AdamState, weight_decay_l2: float = 0.0) -> float:
    """Apply one Adam update in place; returns the effective learning rate.

    Parameters with ``requires_grad=False`` are skipped; a missing gradient
    counts as zero (the parameter still moves only via its moment history,
    which stays zero if it has never received a gradient).
    """
    if weight_decay_l2 < 0:
        raise ParameterError(f"weight decay must be non-negative, got {weight_decay_l2}")

    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        if weight_decay_l2 > 0.0:
            g = g + (2.0 * weight_decay_l2) * p.data
        grads[name] = g

    lr_t = state.lr / (1.0 + state.lr_decay * state.step)
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return lr_t
