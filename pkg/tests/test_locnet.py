"""Detector model: heads, loss, selection, and crop geometry."""

import numpy as np
import pytest

from warpfit.boxes import Box, box_iou, center_to_corners, decode_offsets
from warpfit.errors import DimensionError, ParameterError
from warpfit.locnet import (LocNetModel, build_anchors, crop_resize, detect,
                            expanded_pixel_rect, head_map_sizes, load_locnet,
                            locnet_loss, match_anchors, select_detection)
from warpfit.checkpoint import save_checkpoint
from warpfit.tensor import Tensor


def smooth_l1_np(x):
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(x < 1.0, 0.5 * x * x, x - 0.5)


def bce_with_logits_np(z, y):
    z = float(z)
    return max(z, 0.0) - z * y + np.log1p(np.exp(-abs(z)))


def loss_oracle(loc, logits, labels, targets, ratio=3):
    """Straight-line recomputation of the detector objective."""
    total = 0.0
    num_pos = int(labels.sum())
    for i in range(labels.shape[0]):
        pos = np.nonzero(labels[i])[0]
        for j in pos:
            total += smooth_l1_np(loc[i, j] - targets[i, j]).sum()
            total += bce_with_logits_np(logits[i, j], 1.0)
        neg_losses = [(bce_with_logits_np(logits[i, j], 0.0), j)
                      for j in range(labels.shape[1]) if j not in set(pos)]
        neg_losses.sort(key=lambda t: -t[0])
        quota = min(ratio * len(pos), len(neg_losses))
        total += sum(v for v, _ in neg_losses[:quota])
    return total / num_pos


class TestModel:
    def test_head_map_sizes_scale_with_input(self):
        assert head_map_sizes(112) == [7, 3, 1, 1]
        assert head_map_sizes(64) == [4, 2, 1, 1]

    def test_forward_shapes(self, rng):
        model = LocNetModel(input_size=112, rng=rng)
        x = Tensor(rng.standard_normal((2, 2, 112, 112)).astype(np.float32),
                   dtype=np.float32)
        loc, logits = model.forward(x, training=False)
        assert loc.shape == (2, 180, 4)
        assert logits.shape == (2, 180)

    def test_parameters_are_named_and_unique(self, rng):
        model = LocNetModel(input_size=112, rng=rng)
        params = model.parameters()
        assert params
        for name, tensor in params.items():
            assert name and isinstance(name, str)
            assert tensor.requires_grad

    def test_checkpoint_round_trip(self, rng, tmp_path):
        model = LocNetModel(input_size=112, rng=rng)
        path = tmp_path / "det.wfck"
        payload = {k: v.data for k, v in model.tensors().items()}
        payload["meta.input_size"] = np.array([112.0], dtype=np.float32)
        save_checkpoint(path, payload)
        again = load_locnet(path)
        for name, tensor in model.parameters().items():
            np.testing.assert_array_equal(tensor.data, again.parameters()[name].data)
        x = rng.standard_normal((1, 2, 112, 112)).astype(np.float32)
        out_a = model.forward(Tensor(x, dtype=np.float32), training=False)
        out_b = again.forward(Tensor(x, dtype=np.float32), training=False)
        np.testing.assert_array_equal(out_a[0].data, out_b[0].data)


class TestLoss:
    def test_matches_straight_line_oracle(self, rng):
        anchors = build_anchors(112)
        a = anchors.boxes.shape[0]
        n = 3
        labels = np.zeros((n, a), dtype=bool)
        targets = np.zeros((n, a, 4))
        for i in range(n):
            gt = np.array([rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7),
                           rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)])
            labels[i], targets[i] = match_anchors(anchors, gt)
        loc = rng.standard_normal((n, a, 4))
        logits = rng.standard_normal((n, a))
        got = locnet_loss(Tensor(loc, dtype=np.float64),
                          Tensor(logits, dtype=np.float64), labels, targets)
        want = loss_oracle(loc, logits, labels, targets)
        assert float(got.data) == pytest.approx(want, rel=1e-9)

    def test_no_positives_rejected(self, rng):
        loc = Tensor(np.zeros((1, 10, 4)))
        logits = Tensor(np.zeros((1, 10)))
        with pytest.raises(ParameterError):
            locnet_loss(loc, logits, np.zeros((1, 10), dtype=bool),
                        np.zeros((1, 10, 4)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            locnet_loss(Tensor(np.zeros((1, 9, 4))), Tensor(np.zeros((1, 10))),
                        np.ones((1, 10), dtype=bool), np.zeros((1, 10, 4)))

    def test_gradient_only_through_selected_anchors(self, rng):
        anchors = build_anchors(112)
        a = anchors.boxes.shape[0]
        labels = np.zeros((1, a), dtype=bool)
        labels[0, 5] = True
        targets = np.zeros((1, a, 4))
        loc = Tensor(rng.standard_normal((1, a, 4)), requires_grad=True)
        # logits: positive anchor plus exactly 3 obvious hard negatives
        logit_vals = np.full((1, a), -20.0)
        logit_vals[0, [40, 41, 42]] = 5.0
        logits = Tensor(logit_vals, requires_grad=True)
        from warpfit.tensor import backward
        backward(locnet_loss(loc, logits, labels, targets))
        moved = np.nonzero(np.abs(logits.grad).sum() and np.abs(logits.grad) > 1e-12)[1]
        assert set(moved) == {5, 40, 41, 42}
        loc_rows = np.nonzero(np.abs(loc.grad).sum(axis=2) > 0)[1]
        assert set(loc_rows) <= {5}


class TestSelection:
    def test_below_floor_returns_none(self):
        anchors = build_anchors(112)
        scores = np.full(anchors.boxes.shape[0], 0.005)
        offsets = np.zeros((anchors.boxes.shape[0], 4))
        assert select_detection(scores, offsets, anchors) is None

    def test_zero_offsets_recover_best_anchor(self):
        anchors = build_anchors(112)
        scores = np.full(anchors.boxes.shape[0], 0.005)
        scores[37] = 0.9
        offsets = np.zeros((anchors.boxes.shape[0], 4))
        got = select_detection(scores, offsets, anchors)
        clipped = np.clip(center_to_corners(anchors.boxes[37]), 0, 1)
        np.testing.assert_allclose(got.corners(), clipped, atol=1e-9)
        assert got.score == pytest.approx(0.9)

    def test_nms_collapses_near_duplicates(self):
        anchors = build_anchors(112)
        n = anchors.boxes.shape[0]
        scores = np.full(n, 0.001)
        # aspect triplets live at consecutive indices on the same cell; give
        # the whole first cell high scores and nudge every anchor onto the
        # same decoded box so suppression must leave exactly one
        target = np.array([0.5, 0.5, 0.3, 0.3])
        from warpfit.boxes import encode_offsets
        offsets = np.stack([encode_offsets(anchors.boxes[j], target)
                            for j in range(n)])
        scores[[10, 11, 12]] = [0.7, 0.9, 0.8]
        got = select_detection(scores, offsets, anchors)
        assert got.score == pytest.approx(0.9)
        np.testing.assert_allclose((got.cx, got.cy, got.w, got.h), target, atol=1e-6)


class TestCropGeometry:
    def test_rect_contains_expanded_box(self):
        box = Box(0.5, 0.5, 0.25, 0.3)
        x0, y0, x1, y1 = expanded_pixel_rect(box, 112, 112, margin=0.1)
        xmin, ymin, xmax, ymax = box.corners()
        assert x0 <= (xmin - 0.025) * 112 and x1 >= (xmax + 0.025) * 112
        assert y0 <= (ymin - 0.03) * 112 and y1 >= (ymax + 0.03) * 112
        assert 0 <= x0 < x1 <= 112 and 0 <= y0 < y1 <= 112

    def test_rect_clips_at_borders(self):
        box = Box(0.02, 0.98, 0.1, 0.1)
        x0, y0, x1, y1 = expanded_pixel_rect(box, 112, 112)
        assert x0 == 0 and y1 == 112
        assert x1 - x0 >= 2 and y1 - y0 >= 2

    def test_crop_resize_full_box_is_resize(self, rng):
        img = rng.random((56, 56))
        out = crop_resize(img, Box(0.5, 0.5, 1.0, 1.0), 28)
        from warpfit.imaging import resize_bilinear
        np.testing.assert_allclose(out, resize_bilinear(img, 28, 28), atol=1e-12)

    def test_crop_resize_constant_region(self):
        img = np.full((112, 112), 0.37)
        out = crop_resize(img, Box(0.4, 0.6, 0.2, 0.2), 28)
        assert out.shape == (28, 28)
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_crop_recenters_object(self):
        # a small bright square away from center lands near the crop center
        img = np.zeros((112, 112))
        img[70:80, 30:40] = 1.0
        box = Box((35 + 0.5) / 112, (75 + 0.5) / 112, 10 / 112, 10 / 112)
        out = crop_resize(img, box, 28)
        ys, xs = np.nonzero(out > 0.5)
        assert abs(xs.mean() - 13.5) <= 2.0
        assert abs(ys.mean() - 13.5) <= 2.0


class TestDetect:
    def test_untrained_model_returns_box_or_none(self, rng):
        model = LocNetModel(input_size=112, rng=rng)
        moving = rng.random((112, 112)).astype(np.float32)
        fixed = rng.random((112, 112)).astype(np.float32)
        got = detect(model, moving, fixed)
        assert got is None or isinstance(got, Box)

    def test_shape_mismatch_rejected(self, rng):
        model = LocNetModel(input_size=112, rng=rng)
        with pytest.raises(DimensionError):
            detect(model, np.zeros((112, 112)), np.zeros((64, 64)))
