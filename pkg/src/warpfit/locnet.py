"""Anchor-box localization of the moving image's object in the fixed image.

The two grayscale images are stacked as channels and run through seven
conv / batch-norm / ELU blocks with 2x2 max pooling after the first six,
so the pair is fused from the very first layer. Classless detection
heads (4 box offsets + 1 objectness logit per anchor) sit on the last
four stage outputs; three aspect ratios per cell and four linearly
spaced scales give the anchor pyramid. Training minimizes smooth-L1 on
positive-anchor offsets plus binary cross-entropy with 3:1 hard negative
mining, normalized by the positive count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import (Box, box_dc, box_iou, center_to_corners, corners_to_center,
                    decode_offsets, encode_offsets, nms)
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data import MetricLog
from .errors import DimensionError, ParameterError, TrainingError
from .imaging import resize_bilinear
from .nn import BatchNorm2d, Conv2d, bce_with_logits, maxpool2d, smooth_l1
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, concat, elu, no_grad, sigmoid, zero_grad

ASPECT_RATIOS = (0.5, 1.0, 2.0)
SCALE_RANGE = (0.08, 0.96)
NUM_HEAD_LAYERS = 4
MATCH_IOU = 0.5
NMS_IOU = 0.45
SCORE_FLOOR = 0.01
NEG_POS_RATIO = 3

CHANNELS = (32, 48, 64, 64, 48, 48, 32)
KERNELS = (5, 3, 3, 3, 3, 3, 3)
PADDINGS = (2, 1, 1, 1, 1, 1, 1)
MIN_INPUT = 64


def head_map_sizes(input_size: int) -> list[int]:
    """Spatial sizes of the four feature maps the heads attach to."""
    if input_size < MIN_INPUT or input_size % 16 != 0:
        raise ParameterError(
            f"input size must be a multiple of 16 and at least {MIN_INPUT}, got {input_size}")
    s4 = input_size // 16            # after four 2x2 pools
    s5 = (s4 - 2) // 2 + 1           # fifth pool
    s6 = (s5 - 2) // 2 + 1           # sixth pool
    return [s4, s5, s6, s6]          # final conv keeps the sixth pool's size


@dataclass
class AnchorSet:
    """All anchors in center-size form plus their layout metadata."""

    boxes: np.ndarray        # (A, 4) center-size, clipped to the image
    corners: np.ndarray      # (A, 4) corner form of the same boxes
    map_sizes: list[int]
    scales: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]


def build_anchors(input_size: int) -> AnchorSet:
    """Anchor pyramid: per head layer a linear scale, per cell three aspects.

    Anchor (w, h) = (s * sqrt(a), s / sqrt(a)); anchors are clipped to the
    unit square in corner form. Enumeration order matches the heads: layer
    by layer, cells row-major, aspect ratios innermost.
    """
    sizes = head_map_sizes(input_size)
    scales = np.linspace(SCALE_RANGE[0], SCALE_RANGE[1], NUM_HEAD_LAYERS)
    rows = []
    for fsize, scale in zip(sizes, scales):
        centers = (np.arange(fsize) + 0.5) / fsize
        for cy in centers:
            for cx in centers:
                for aspect in ASPECT_RATIOS:
                    w = scale * np.sqrt(aspect)
                    h = scale / np.sqrt(aspect)
                    rows.append((cx, cy, w, h))
    boxes = np.asarray(rows, dtype=np.float64)
    clipped = np.clip(center_to_corners(boxes), 0.0, 1.0)
    return AnchorSet(corners_to_center(clipped), clipped, sizes, scales)


class LocNetModel:
    """Backbone plus classless heads; owns every parameter tensor."""

    def __init__(self, input_size: int = 112, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = int(input_size)
        self.anchors = build_anchors(self.input_size)
        self.convs: list[Conv2d] = []
        self.norms: list[BatchNorm2d] = []
        cin = 2
        for i, (cout, k, p) in enumerate(zip(CHANNELS, KERNELS, PADDINGS), start=1):
            self.convs.append(Conv2d(f"c{i}", cin, cout, k, rng, padding=p))
            self.norms.append(BatchNorm2d(f"bn{i}", cout))
            cin = cout
        # heads see the stage outputs of blocks 4..7
        head_channels = [CHANNELS[3], CHANNELS[4], CHANNELS[5], CHANNELS[6]]
        values_per_cell = len(ASPECT_RATIOS) * 5
        self.heads = [
            Conv2d(f"head{i + 4}", c, values_per_cell, 3, rng, padding=1, weight_std=0.01)
            for i, c in enumerate(head_channels)
        ]

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in (*self.convs, *self.norms, *self.heads):
            out.update(layer.tensors())
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors().items() if v.requires_grad}

    def forward(self, pair: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """(N,2,S,S) -> offsets (N,A,4) and objectness logits (N,A)."""
        if pair.ndim != 4 or pair.shape[1] != 2:
            raise DimensionError(f"expected (N,2,S,S) input, got {pair.shape}")
        if pair.shape[2] != self.input_size or pair.shape[3] != self.input_size:
            raise DimensionError(
                f"model is built for {self.input_size}px inputs, got {pair.shape[2:]}")
        x = pair
        taps = []
        for i in range(7):
            x = self.norms[i](self.convs[i](x), training)
            # each block is conv -> norm -> ELU (-> pool); ELU is strictly
            # increasing so it commutes with max pooling, and applying it
            # after the pool touches a quarter of the elements
            if i < 6:
                x = maxpool2d(x, 2, 2)
            x = elu(x)
            if i >= 3:
                taps.append(x)
        per_layer = []
        n = pair.shape[0]
        for head, feat in zip(self.heads, taps):
            raw = head(feat)  # (N, 15, f, f)
            f = raw.shape[2]
            cells = raw.reshape((n, len(ASPECT_RATIOS), 5, f, f))
            cells = cells.transpose((0, 3, 4, 1, 2))       # (N, f, f, aspects, 5)
            per_layer.append(cells.reshape((n, f * f * len(ASPECT_RATIOS), 5)))
        merged = concat(per_layer, axis=1)                 # (N, A, 5)
        return merged[:, :, :4], merged[:, :, 4]


def match_anchors(anchors: AnchorSet, gt_center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive mask and offset targets for a single ground-truth box.

    Positives are every anchor with IoU >= 0.5 plus the best-IoU anchor,
    so there is always at least one positive.
    """
    gt_center = np.asarray(gt_center, dtype=np.float64)
    if gt_center.shape != (4,):
        raise DimensionError(f"ground truth must be one center-size box, got {gt_center.shape}")
    gt_corners = center_to_corners(gt_center)
    ious = box_iou(anchors.corners, gt_corners)
    labels = ious >= MATCH_IOU
    labels[int(np.argmax(ious))] = True
    return labels, encode_offsets(anchors.boxes, gt_center).astype(np.float32)


def locnet_loss(loc_pred: Tensor, logit_pred: Tensor, labels: np.ndarray,
                offset_targets: np.ndarray, neg_pos_ratio: int = NEG_POS_RATIO) -> Tensor:
    """Smooth-L1 on positive anchors + mined BCE, over the positive count.

    Negatives are mined per image: the ``neg_pos_ratio`` * positives
    highest-loss non-positive anchors enter the objectness term.
    """
    labels = np.asarray(labels, dtype=bool)
    n, a = labels.shape
    if loc_pred.shape != (n, a, 4) or logit_pred.shape != (n, a):
        raise DimensionError(
            f"prediction shapes {loc_pred.shape}/{logit_pred.shape} do not match labels {labels.shape}")
    num_pos = int(labels.sum())
    if num_pos == 0:
        raise ParameterError("every sample needs at least one positive anchor")

    bce_all = bce_with_logits(logit_pred, labels.astype(logit_pred.data.dtype))

    pos_rows, pos_cols = np.nonzero(labels)
    diff = loc_pred[pos_rows, pos_cols] - Tensor(
        offset_targets[pos_rows, pos_cols], dtype=loc_pred.data.dtype)
    loc_term = smooth_l1(diff).sum()

    # mine hard negatives on the current BCE values (selection is data-driven
    # but the gradient flows only through the selected entries)
    neg_scores = np.where(labels, -np.inf, bce_all.data)
    order = np.argsort(-neg_scores, axis=1)
    per_image_pos = labels.sum(axis=1)
    quota = np.minimum(neg_pos_ratio * per_image_pos, a - per_image_pos)
    take = np.arange(a)[None, :] < quota[:, None]
    neg_rows = np.nonzero(take)[0]
    neg_cols = order[take]

    conf_term = bce_all[pos_rows, pos_cols].sum() + bce_all[neg_rows, neg_cols].sum()
    return (loc_term + conf_term) * (1.0 / num_pos)


def select_detection(scores: np.ndarray, offsets: np.ndarray, anchors: AnchorSet,
                     score_floor: float = SCORE_FLOOR,
                     nms_iou: float = NMS_IOU) -> Box | None:
    """Decode, suppress, and return the single best detection (or None)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.max() < score_floor:
        return None
    decoded = decode_offsets(anchors.boxes, offsets)
    corners = np.clip(center_to_corners(decoded), 0.0, 1.0)
    keep = np.nonzero(scores >= score_floor)[0]
    kept = nms(corners[keep], scores[keep], nms_iou)
    best = keep[kept[0]]
    cs = corners_to_center(corners[best])
    if cs[2] <= 0 or cs[3] <= 0:
        return None
    return Box(float(cs[0]), float(cs[1]), float(cs[2]), float(cs[3]), float(scores[best]))


def detect(model: LocNetModel, moving: np.ndarray, fixed: np.ndarray) -> Box | None:
    """Best box for the moving object inside the fixed image, or None if
    nothing clears the score floor."""
    moving = np.asarray(moving, dtype=np.float32)
    fixed = np.asarray(fixed, dtype=np.float32)
    if moving.shape != fixed.shape or moving.ndim != 2:
        raise DimensionError(
            f"detect expects two equal 2-d images, got {moving.shape} and {fixed.shape}")
    pair = np.stack([moving, fixed])[None]
    with no_grad():
        loc, logits = model.forward(Tensor(pair, dtype=np.float32), training=False)
        scores = sigmoid(logits).data[0]
    return select_detection(scores, loc.data[0], model.anchors)


CROP_MARGIN = 0.1


def expanded_pixel_rect(box: Box, height: int, width: int,
                        margin: float = CROP_MARGIN) -> tuple[int, int, int, int]:
    """Box -> integer pixel rect (x0, y0, x1, y1), expanded by ``margin`` of
    the box size per side, clipped, snapped outward to whole pixels."""
    xmin, ymin, xmax, ymax = box.corners()
    bw, bh = xmax - xmin, ymax - ymin
    x0 = int(np.floor(max(0.0, xmin - margin * bw) * width))
    y0 = int(np.floor(max(0.0, ymin - margin * bh) * height))
    x1 = int(np.ceil(min(1.0, xmax + margin * bw) * width))
    y1 = int(np.ceil(min(1.0, ymax + margin * bh) * height))
    x1 = min(max(x1, x0 + 2), width)
    y1 = min(max(y1, y0 + 2), height)
    x0 = min(x0, x1 - 2)
    y0 = min(y0, y1 - 2)
    if x0 < 0 or y0 < 0:
        raise ParameterError(f"box {box} does not give a usable crop on {height}x{width}")
    return x0, y0, x1, y1


def crop_resize(image: np.ndarray, box: Box, out_size: int) -> np.ndarray:
    """Crop the expanded box out of a (H, W) image and resize to a square."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionError(f"crop_resize expects a 2-d image, got {image.shape}")
    if out_size < 2:
        raise ParameterError(f"output size must be at least 2, got {out_size}")
    h, w = image.shape
    inter_w = min(box.corners()[2], 1.0) - max(box.corners()[0], 0.0)
    inter_h = min(box.corners()[3], 1.0) - max(box.corners()[1], 0.0)
    if inter_w <= 0 or inter_h <= 0:
        raise ParameterError(f"box {box} does not intersect the image")
    x0, y0, x1, y1 = expanded_pixel_rect(box, h, w)
    return resize_bilinear(image[y0:y1, x0:x1], out_size, out_size).astype(np.float32)


def _norm_boxes(boxes_px: np.ndarray, size: int) -> np.ndarray:
    """Pixel corner boxes -> normalized center-size."""
    return corners_to_center(np.asarray(boxes_px, dtype=np.float64) / size)


def evaluate_detection(model: LocNetModel, moving_u8: np.ndarray, fixed_u8: np.ndarray,
                       boxes_px: np.ndarray, batch: int = 64) -> tuple[float, float, float]:
    """Mean box DC, mean box IoU, and detection rate over a dataset.

    Uses the batched forward pass and picks the argmax-score anchor per
    sample, which for a single pick is exactly what detect() returns after
    NMS. Samples below the score floor count as zero overlap.
    """
    size = model.input_size
    gt_corners = np.asarray(boxes_px, dtype=np.float64) / size
    m = moving_u8.shape[0]
    dcs, ious, found = [], [], 0
    for start in range(0, m, batch):
        sl = slice(start, min(start + batch, m))
        pair = np.stack([moving_u8[sl], fixed_u8[sl]], axis=1).astype(np.float32) / 255.0
        with no_grad():
            loc, logits = model.forward(Tensor(pair, dtype=np.float32), training=False)
            scores = sigmoid(logits).data
        for i in range(pair.shape[0]):
            best = int(np.argmax(scores[i]))
            if scores[i, best] < SCORE_FLOOR:
                dcs.append(0.0)
                ious.append(0.0)
                continue
            found += 1
            decoded = decode_offsets(model.anchors.boxes[best], loc.data[i, best])
            corners = np.clip(center_to_corners(decoded), 0.0, 1.0)
            dcs.append(float(box_dc(corners, gt_corners[start + i])))
            ious.append(float(box_iou(corners, gt_corners[start + i])))
    return float(np.mean(dcs)), float(np.mean(ious)), found / m


def train_locnet(model: LocNetModel, train_data: dict, val_data: dict, *,
                 epochs: int, batch_size: int, lr: float, lr_decay: float,
                 weight_decay: float, rng: np.random.Generator,
                 metrics_path, checkpoint_path,
                 early_stop_iou: float = 2.0,
                 beta1: float = 0.9, beta2: float = 0.99,
                 train_eval_cap: int = 256) -> dict:
    """Train; log per-epoch metrics; keep the best-validation-IoU weights.

    train/val dicts need 'moving' and 'fixed' u8 arrays (M,S,S) and
    'boxes_px' (M,4) pixel corner boxes. Early stopping triggers once the
    validation IoU reaches ``early_stop_iou``.
    """
    if epochs < 1 or batch_size < 1:
        raise ParameterError("epochs and batch size must be positive")
    size = model.input_size
    m = train_data["moving"].shape[0]
    if batch_size > m:
        raise ParameterError(f"batch size {batch_size} exceeds {m} training samples")

    gt_center = _norm_boxes(train_data["boxes_px"], size)
    all_labels = np.empty((m, len(model.anchors)), dtype=bool)
    all_offsets = np.empty((m, len(model.anchors), 4), dtype=np.float32)
    for i in range(m):
        all_labels[i], all_offsets[i] = match_anchors(model.anchors, gt_center[i])

    params = model.parameters()
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, lr_decay=lr_decay)
    logger = MetricLog(metrics_path)
    best = {"iou": -1.0, "epoch": 0}
    history = []
    cap = min(train_eval_cap, m)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(m)
        losses = []
        for start in range(0, m - batch_size + 1, batch_size):
            idx = perm[start:start + batch_size]
            pair = np.stack([train_data["moving"][idx], train_data["fixed"][idx]],
                            axis=1).astype(np.float32) / 255.0
            loc, logits = model.forward(Tensor(pair, dtype=np.float32), training=True)
            loss = locnet_loss(loc, logits, all_labels[idx], all_offsets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // batch_size}")
            zero_grad(params)
            backward(loss)
            adam_step(params, state, weight_decay)
            losses.append(value)

        train_dc, train_iou, _ = evaluate_detection(
            model, train_data["moving"][:cap], train_data["fixed"][:cap],
            train_data["boxes_px"][:cap])
        val_dc, val_iou, val_rate = evaluate_detection(
            model, val_data["moving"], val_data["fixed"], val_data["boxes_px"])
        mean_loss = float(np.mean(losses))
        logger.row(epoch, "train", mean_loss, train_dc, train_iou)
        logger.row(epoch, "val", mean_loss, val_dc, val_iou)
        history.append({"epoch": epoch, "loss": mean_loss, "val_dc": val_dc,
                        "val_iou": val_iou, "val_rate": val_rate})
        if val_iou > best["iou"]:
            best = {"iou": val_iou, "epoch": epoch}
            payload = dict(model.tensors())
            payload["meta.input_size"] = np.array([model.input_size], dtype=np.float32)
            save_checkpoint(checkpoint_path, payload)
        if val_iou >= early_stop_iou:
            break
    return {"history": history, "best": best}


def load_locnet(path) -> LocNetModel:
    loaded = load_checkpoint(path)
    if "meta.input_size" not in loaded:
        raise ParameterError(f"{path}: checkpoint lacks meta.input_size")
    model = LocNetModel(int(loaded["meta.input_size"][0]))
    load_into(model.tensors(), loaded)
    return model
