"""Overlap losses for training and hard metrics for evaluation.

The training loss works on soft (real-valued) masks so gradients exist;
the reported metrics binarize first and count pixels. On already-binary
inputs the soft dice loss agrees with 1 - DC up to the stabilizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor

DICE_EPS = 1e-7


def dice_loss(fixed, moved, axes=None) -> Tensor:
    """Soft dice loss: 1 - 2*sum(f*m) / (sum(f) + sum(m) + eps).

    ``axes=None`` reduces everything to one scalar; a tuple of axes gives a
    per-sample loss for batched inputs. The stabilizer makes the
    empty-vs-empty case come out as 0 loss.
    """
    moved = as_tensor(moved)
    fixed = as_tensor(fixed, moved)
    if fixed.shape != moved.shape:
        raise DimensionError(f"mask shapes differ: {fixed.shape} vs {moved.shape}")
    inter = (fixed * moved).sum(axis=axes)
    denom = fixed.sum(axis=axes) + moved.sum(axis=axes) + DICE_EPS
    return 1.0 - (2.0 * inter) / denom


def smoothness_loss(displacements, points_per_side: int, axes_batched: bool = True) -> Tensor:
    """Sum of squared forward differences of the displacement lattice.

    ``displacements`` is (..., K, 2) or (..., 2K) over a k x k lattice in
    row-major order. Differences are taken between horizontally and
    vertically adjacent control points (the last column/row has no
    right/down neighbor), so any constant displacement costs zero and the
    loss is invariant to adding a global translation.
    """
    k = int(points_per_side)
    if k < 2:
        raise ParameterError(f"lattice side must be at least 2, got {k}")
    d = as_tensor(displacements)
    expect = k * k * 2
    if d.shape[-2:] == (k * k, 2):
        d = d.reshape(d.shape[:-2] + (k, k, 2))
    elif d.shape[-1] == expect:
        d = d.reshape(d.shape[:-1] + (k, k, 2))
    else:
        raise DimensionError(
            f"displacements must end in ({k * k}, 2) or ({expect},), got {d.shape}")
    down = d[..., 1:, :, :] - d[..., :-1, :, :]
    right = d[..., :, 1:, :] - d[..., :, :-1, :]
    reduce = (-3, -2, -1)
    return (down * down).sum(axis=reduce) + (right * right).sum(axis=reduce)


@dataclass
class LossBreakdown:
    """Dice term, smoothness term, their weighted total, and the weight.

    Fields hold scalar Tensors while a graph is being built and plain
    floats in reported results; ``as_floats`` converts.
    """

    dice: object
    smoothness: object
    total: object
    weight: float

    def as_floats(self) -> "LossBreakdown":
        def val(x):
            return x.item() if isinstance(x, Tensor) else float(x)
        return LossBreakdown(val(self.dice), val(self.smoothness), val(self.total), self.weight)


def total_loss(fixed, moved, displacements, points_per_side: int, weight: float = 1.0) -> LossBreakdown:
    """dice + weight * smoothness for a single mask pair (scalar Tensors).

    ``total`` is built from the same two term tensors, so the identity
    total = dice + weight * smoothness holds exactly in evaluation order.
    """
    if weight < 0:
        raise ParameterError(f"smoothness weight must be non-negative, got {weight}")
    d = dice_loss(fixed, moved)
    s = smoothness_loss(displacements, points_per_side)
    return LossBreakdown(d, s, d + s * weight, weight)


def binarize(mask, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(mask) >= threshold


def dc_metric(mask_a, mask_b, threshold: float = 0.5) -> float:
    """Hard dice coefficient 2|A&B| / (|A| + |B|); both empty counts as 1."""
    a = binarize(mask_a, threshold)
    b = binarize(mask_b, threshold)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def miou_metric(mask_a, mask_b, threshold: float = 0.5) -> float:
    """Intersection over union of binarized masks; both empty counts as 1."""
    a = binarize(mask_a, threshold)
    b = binarize(mask_b, threshold)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union
