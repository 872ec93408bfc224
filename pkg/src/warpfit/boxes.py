"""Axis-aligned boxes, IoU, the anchor offset codec, and NMS.

Boxes live in normalized image coordinates: 0..1 across the full image
extent, x to the right and y down. Center-size form is (cx, cy, w, h);
corner form is (xmin, ymin, xmax, ymax). Array helpers operate on (...,4)
stacks; the Box dataclass is the single-detection currency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

# offset scaling shared by encode/decode: centers are measured in anchor
# sizes and multiplied by 10, log-sizes by 5
CENTER_SCALE = 10.0
SIZE_SCALE = 5.0


@dataclass
class Box:
    """One detection: center, size, and an objectness score in [0, 1]."""

    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ParameterError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(xmin: float, ymin: float, xmax: float, ymax: float,
                     score: float = 1.0) -> "Box":
        return Box((xmin + xmax) / 2.0, (ymin + ymax) / 2.0, xmax - xmin, ymax - ymin, score)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2.0, wh], axis=-1)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of corner-form boxes, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    iy = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def box_dc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dice coefficient of corner-form boxes: 2*inter / (area_a + area_b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    iy = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = ix * iy
    total = ((a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
             + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]))
    return np.where(total > 0, 2.0 * inter / np.where(total > 0, total, 1.0), 0.0)


def iou(a: Box, b: Box) -> float:
    return float(box_iou(np.array(a.corners()), np.array(b.corners())))


def encode_offsets(anchors_cs: np.ndarray, gt_cs: np.ndarray) -> np.ndarray:
    """Regression targets for each anchor against one ground-truth box.

    (dcx/wa * 10, dcy/ha * 10, log(w/wa) * 5, log(h/ha) * 5)
    """
    anchors_cs = np.asarray(anchors_cs, dtype=np.float64)
    gt = np.asarray(gt_cs, dtype=np.float64)
    if gt.shape != (4,):
        raise DimensionError(f"ground truth must be a single center-size box, got {gt.shape}")
    if np.any(anchors_cs[..., 2:] <= 0) or np.any(gt[2:] <= 0):
        raise ParameterError("boxes must have positive sides to encode offsets")
    out = np.empty_like(anchors_cs)
    out[..., 0] = (gt[0] - anchors_cs[..., 0]) / anchors_cs[..., 2] * CENTER_SCALE
    out[..., 1] = (gt[1] - anchors_cs[..., 1]) / anchors_cs[..., 3] * CENTER_SCALE
    out[..., 2] = np.log(gt[2] / anchors_cs[..., 2]) * SIZE_SCALE
    out[..., 3] = np.log(gt[3] / anchors_cs[..., 3]) * SIZE_SCALE
    return out


def decode_offsets(anchors_cs: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Inverse of encode_offsets; returns center-size boxes."""
    anchors_cs = np.asarray(anchors_cs, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors_cs.shape, offsets.shape))
    out[..., 0] = offsets[..., 0] / CENTER_SCALE * anchors_cs[..., 2] + anchors_cs[..., 0]
    out[..., 1] = offsets[..., 1] / CENTER_SCALE * anchors_cs[..., 3] + anchors_cs[..., 1]
    out[..., 2] = np.exp(offsets[..., 2] / SIZE_SCALE) * anchors_cs[..., 2]
    out[..., 3] = np.exp(offsets[..., 3] / SIZE_SCALE) * anchors_cs[..., 3]
    return out


def nms(corners: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices, best first."""
    if not (0.0 <= iou_threshold <= 1.0):
        raise ParameterError(f"IoU threshold must lie in [0, 1], got {iou_threshold}")
    corners = np.asarray(corners, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if corners.ndim != 2 or corners.shape[1] != 4:
        raise DimensionError(f"corners must be (M, 4), got {corners.shape}")
    if scores.shape != (corners.shape[0],):
        raise DimensionError(f"scores shape {scores.shape} does not match {corners.shape[0]} boxes")
    order = [int(i) for i in np.argsort(-scores, kind="stable")]
    kept: list[int] = []
    while order:
        best = order.pop(0)
        kept.append(best)
        if not order:
            break
        rest = np.array(order)
        overlaps = box_iou(corners[rest], corners[best])
        order = [int(i) for i, ov in zip(rest, overlaps) if ov <= iou_threshold]
    return kept
