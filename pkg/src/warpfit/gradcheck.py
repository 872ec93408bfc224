"""Finite-difference verification of autodiff gradients.

Checks run in float64: the backward pass is compared against central
differences with step 1e-6, using a relative error that is guarded
against tiny denominators. Functions under test must be deterministic
and built from tensor ops only.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .tensor import Tensor, backward, no_grad, use_dtype

FD_STEP = 1e-6
FD_TOLERANCE = 1e-5


def numerical_gradient(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x`` (float64)."""
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        fp = float(f(x))
        flat[i] = saved - step
        fm = float(f(x))
        flat[i] = saved
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by max(1, |a|_inf, |n|_inf)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn, *arrays, step: float = FD_STEP) -> float:
    """Compare autodiff against finite differences for every input of ``fn``.

    ``fn`` takes one Tensor per input array and returns a scalar Tensor.
    Returns the worst relative error across all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with use_dtype(np.float64):
        tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        loss = fn(*tensors)
        if loss.data.size != 1:
            raise ParameterError("check_gradients needs a scalar-valued function")
        backward(loss)

        worst = 0.0
        for i, t in enumerate(tensors):
            def evaluate(x, _i=i):
                inputs = [Tensor(x if j == _i else arrays[j], dtype=np.float64)
                          for j in range(len(arrays))]
                with no_grad():
                    return fn(*inputs).item()

            numeric = numerical_gradient(evaluate, arrays[i], step)
            analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(analytic, numeric))
    return worst
