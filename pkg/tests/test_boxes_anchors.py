"""Box algebra, offset codecs, NMS, and anchor layout."""

import numpy as np
import pytest

from warpfit.boxes import (Box, box_dc, box_iou, center_to_corners,
                           corners_to_center, decode_offsets, encode_offsets,
                           iou, nms)
from warpfit.errors import ParameterError
from warpfit.locnet import (ASPECT_RATIOS, SCALE_RANGE, build_anchors,
                            head_map_sizes, match_anchors)


def raster_iou(a, b, res=100):
    """Brute-force IoU by rasterizing boxes on a res x res grid."""
    def rast(c):
        img = np.zeros((res, res), dtype=bool)
        x0, y0, x1, y1 = np.rint(np.clip(np.asarray(c) * res, 0, res)).astype(int)
        img[y0:y1, x0:x1] = True
        return img

    ra, rb = rast(a), rast(b)
    union = np.logical_or(ra, rb).sum()
    return np.logical_and(ra, rb).sum() / union if union else 0.0


class TestBoxBasics:
    def test_corner_center_round_trip(self, rng):
        corners = np.sort(rng.random((20, 2, 2)), axis=1).reshape(20, 4)[:, [0, 2, 1, 3]]
        # columns are xmin,ymin,xmax,ymax with min<max by construction
        corners = corners[:, [0, 2, 1, 3]]
        back = center_to_corners(corners_to_center(corners))
        np.testing.assert_allclose(back, corners, atol=1e-9)

    def test_identical_boxes_iou_one(self):
        a = np.array([0.1, 0.1, 0.4, 0.5])
        assert box_iou(a, a) == pytest.approx(1.0)

    def test_disjoint_boxes_iou_zero(self):
        assert box_iou(np.array([0.0, 0.0, 0.2, 0.2]),
                       np.array([0.5, 0.5, 0.9, 0.9])) == 0.0

    def test_quarter_overlap_hand_case(self):
        # (0,0,10,10) and (5,5,15,15) in a 100-unit frame: inter 25,
        # union 175, ratio 1/7
        a = np.array([0.0, 0.0, 0.10, 0.10])
        b = np.array([0.05, 0.05, 0.15, 0.15])
        assert box_iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_iou_matches_raster_oracle(self, rng):
        def grid_box():
            x0, x1 = np.sort(rng.choice(101, size=2, replace=False))
            y0, y1 = np.sort(rng.choice(101, size=2, replace=False))
            return np.array([x0, y0, x1, y1]) / 100

        for _ in range(40):
            a, b = grid_box(), grid_box()
            assert box_iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-3)

    def test_iou_symmetric_and_bounded(self, rng):
        for _ in range(30):
            a = np.sort(rng.random(2)), np.sort(rng.random(2))
            box_a = np.array([a[0][0], a[1][0], a[0][1] + 0.01, a[1][1] + 0.01])
            b = np.sort(rng.random(2)), np.sort(rng.random(2))
            box_b = np.array([b[0][0], b[1][0], b[0][1] + 0.01, b[1][1] + 0.01])
            v = box_iou(box_a, box_b)
            assert 0.0 <= v <= 1.0
            assert v == box_iou(box_b, box_a)

    def test_box_object_validation(self):
        with pytest.raises(ParameterError):
            Box(0.5, 0.5, -0.1, 0.2)
        b = Box(0.5, 0.5, 0.2, 0.4)
        np.testing.assert_allclose(b.corners(), [0.4, 0.3, 0.6, 0.7])
        assert iou(b, b) == pytest.approx(1.0)

    def test_box_dc_relates_to_iou(self):
        a = np.array([0.0, 0.0, 0.4, 0.4])
        b = np.array([0.2, 0.0, 0.6, 0.4])
        i = box_iou(a, b)
        assert box_dc(a, b) == pytest.approx(2 * i / (1 + i), abs=1e-12)


class TestOffsetCodec:
    def test_zero_offsets_for_matching_box(self):
        anchor = np.array([0.5, 0.5, 0.2, 0.3])
        off = encode_offsets(anchor, anchor)
        np.testing.assert_allclose(off, 0.0, atol=1e-12)

    def test_round_trip_random(self, rng):
        for _ in range(100):
            anchor = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                               rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)])
            gt = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                           rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)])
            decoded = decode_offsets(anchor, encode_offsets(anchor, gt))
            np.testing.assert_allclose(decoded, gt, atol=1e-6)

    def test_scaling_factors(self):
        anchor = np.array([0.5, 0.5, 0.2, 0.2])
        gt = np.array([0.52, 0.5, 0.2 * np.e, 0.2])
        off = encode_offsets(anchor, gt)
        # center shift of 0.02 over anchor size 0.2 scaled by 10 -> 1.0
        assert off[0] == pytest.approx(1.0, abs=1e-9)
        # log size ratio of 1 scaled by 5 -> 5.0
        assert off[2] == pytest.approx(5.0, abs=1e-9)


class TestNms:
    def test_keeps_higher_score_of_overlapping_pair(self):
        boxes = np.array([[0.1, 0.1, 0.5, 0.5],
                          [0.12, 0.1, 0.52, 0.5],
                          [0.7, 0.7, 0.9, 0.9]])
        scores = np.array([0.8, 0.9, 0.3])
        keep = nms(boxes, scores, 0.45)
        assert keep == [1, 2]

    def test_survivors_pairwise_below_threshold(self, rng):
        boxes = []
        for _ in range(30):
            x0, y0 = rng.uniform(0, 0.7, 2)
            w, h = rng.uniform(0.05, 0.3, 2)
            boxes.append([x0, y0, min(1.0, x0 + w), min(1.0, y0 + h)])
        boxes = np.asarray(boxes)
        scores = rng.random(30)
        keep = nms(boxes, scores, 0.45)
        for i, a in enumerate(keep):
            for b in keep[i + 1:]:
                assert box_iou(boxes[a], boxes[b]) < 0.45

    def test_empty_input(self):
        assert nms(np.zeros((0, 4)), np.zeros(0), 0.45) == []


class TestAnchors:
    def test_map_sizes_for_112(self):
        assert head_map_sizes(112) == [7, 3, 1, 1]

    def test_total_count_and_per_layer(self):
        anchors = build_anchors(112)
        per_layer = [s * s * len(ASPECT_RATIOS) for s in head_map_sizes(112)]
        assert per_layer == [147, 27, 3, 3]
        assert anchors.boxes.shape == (sum(per_layer), 4)
        assert anchors.boxes.shape[0] == 180

    def test_scales_linear_between_endpoints(self):
        lo, hi = SCALE_RANGE
        scales = np.linspace(lo, hi, 4)
        assert scales[0] == pytest.approx(0.08)
        assert scales[-1] == pytest.approx(0.96)
        np.testing.assert_allclose(np.diff(scales), np.diff(scales)[0])

    def test_aspect_one_is_square(self):
        anchors = build_anchors(112)
        # aspects cycle fastest; index 1 is aspect 1.0 of the first cell
        first_cell = anchors.boxes[:3]
        square = first_cell[list(ASPECT_RATIOS).index(1.0)]
        assert square[2] == pytest.approx(square[3])
        wide = first_cell[list(ASPECT_RATIOS).index(2.0)]
        assert wide[2] == pytest.approx(wide[3] * 2.0, rel=1e-6)

    def test_corner_boxes_are_clipped(self):
        anchors = build_anchors(112)
        corners = center_to_corners(anchors.boxes)
        assert corners.min() >= -1e-9
        assert corners.max() <= 1.0 + 1e-9


class TestMatching:
    def test_gt_equal_to_anchor_is_positive_with_zero_offsets(self):
        anchors = build_anchors(112)
        pick = 60
        gt = anchors.boxes[pick].copy()
        labels, offsets = match_anchors(anchors, gt)
        assert labels[pick]
        np.testing.assert_allclose(offsets[pick], 0.0, atol=1e-9)

    def test_always_at_least_one_positive(self, rng):
        anchors = build_anchors(112)
        for _ in range(25):
            gt = np.array([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                           rng.uniform(0.02, 0.08), rng.uniform(0.02, 0.08)])
            labels, _ = match_anchors(anchors, gt)
            assert labels.sum() >= 1

    def test_labels_match_exhaustive_iou(self, rng):
        anchors = build_anchors(112)
        gt = np.array([0.4, 0.45, 0.3, 0.25])
        labels, _ = match_anchors(anchors, gt)
        gt_corners = center_to_corners(gt)
        ious = np.array([box_iou(c, gt_corners)
                         for c in center_to_corners(anchors.boxes)])
        want = ious >= 0.5
        want[np.argmax(ious)] = True
        np.testing.assert_array_equal(labels, want)

    def test_positive_offsets_decode_back_to_gt(self):
        anchors = build_anchors(112)
        gt = np.array([0.3, 0.6, 0.2, 0.18])
        labels, offsets = match_anchors(anchors, gt)
        for idx in np.nonzero(labels)[0]:
            decoded = decode_offsets(anchors.boxes[idx], offsets[idx])
            np.testing.assert_allclose(decoded, gt, atol=1e-6)
