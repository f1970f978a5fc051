"""Box arithmetic: flips, delta sign correction, IoU, NMS."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsodlab.geometry import (
    DELTA_SIGNS,
    BoundingBox,
    FlipKind,
    FlipTransform,
    GeometryError,
    RegressionDelta,
    correct_deltas,
    flip_box,
    iou,
    nms,
    pairwise_iou,
)

ALL_KINDS = [FlipKind.NONE, FlipKind.HORIZONTAL, FlipKind.VERTICAL, FlipKind.DIAGONAL]


# Integer coordinates keep reflections exact (W - x is lossless), which the
# involution properties rely on.
def int_box(rng, size=100):
    x1, y1 = rng.integers(0, size - 1, size=2)
    w, h = rng.integers(1, size - max(x1, y1), size=2) if max(x1, y1) < size - 1 else (1, 1)
    w = int(min(w, size - x1))
    h = int(min(h, size - y1))
    return BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


class TestFlipBox:
    def test_none_is_identity(self):
        b = BoundingBox(10, 20, 30, 40)
        t = FlipTransform(FlipKind.NONE, 100, 100)
        assert flip_box(b, t) == b

    def test_horizontal_reflection(self):
        b = BoundingBox(10, 20, 30, 40)
        t = FlipTransform(FlipKind.HORIZONTAL, 100, 100)
        assert flip_box(b, t).as_tuple() == (70, 20, 90, 40)

    def test_diagonal_reflection(self):
        b = BoundingBox(10, 20, 30, 40)
        t = FlipTransform(FlipKind.DIAGONAL, 100, 100)
        assert flip_box(b, t).as_tuple() == (70, 60, 90, 80)

    def test_degenerate_box_rejected(self):
        with pytest.raises(GeometryError):
            BoundingBox(10, 10, 10, 40).validate()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_involution_and_area(self, kind):
        rng = np.random.default_rng(7)
        t = FlipTransform(kind, 100, 100)
        for _ in range(200):
            b = int_box(rng)
            f = flip_box(b, t)
            assert f.area == b.area
            assert flip_box(f, t) == b

    def test_diagonal_is_h_then_v(self):
        rng = np.random.default_rng(11)
        th = FlipTransform(FlipKind.HORIZONTAL, 100, 100)
        tv = FlipTransform(FlipKind.VERTICAL, 100, 100)
        td = FlipTransform(FlipKind.DIAGONAL, 100, 100)
        for _ in range(100):
            b = int_box(rng)
            assert flip_box(b, td) == flip_box(flip_box(b, th), tv)


class TestCorrectDeltas:
    def test_diagonal_negates_xy(self):
        d = RegressionDelta(0.5, -0.3, 0.1, 0.2)
        out = correct_deltas(d, FlipTransform(FlipKind.DIAGONAL, 100, 100))
        assert out == RegressionDelta(-0.5, 0.3, 0.1, 0.2)

    def test_horizontal_negates_x_only(self):
        d = RegressionDelta(0.5, -0.3, 0.1, 0.2)
        out = correct_deltas(d, FlipTransform(FlipKind.HORIZONTAL, 100, 100))
        assert out == RegressionDelta(-0.5, -0.3, 0.1, 0.2)

    def test_none_is_identity(self):
        d = RegressionDelta(0.5, -0.3, 0.1, 0.2)
        assert correct_deltas(d, FlipTransform(FlipKind.NONE, 100, 100)) == d

    def test_sign_table(self):
        assert DELTA_SIGNS[FlipKind.DIAGONAL] == (-1.0, -1.0)
        assert DELTA_SIGNS[FlipKind.HORIZONTAL] == (-1.0, 1.0)
        assert DELTA_SIGNS[FlipKind.VERTICAL] == (1.0, -1.0)
        assert DELTA_SIGNS[FlipKind.NONE] == (1.0, 1.0)

    @given(
        st.tuples(*[st.floats(-2, 2, allow_nan=False) for _ in range(4)]),
        st.sampled_from(ALL_KINDS),
    )
    def test_involution(self, vals, kind):
        d = RegressionDelta(*vals)
        t = FlipTransform(kind, 64, 64)
        assert correct_deltas(correct_deltas(d, t), t) == d

    def test_diagonal_equals_h_compose_v(self):
        d = RegressionDelta(0.7, -1.1, 0.3, -0.4)
        th = FlipTransform(FlipKind.HORIZONTAL, 64, 64)
        tv = FlipTransform(FlipKind.VERTICAL, 64, 64)
        td = FlipTransform(FlipKind.DIAGONAL, 64, 64)
        assert correct_deltas(d, td) == correct_deltas(correct_deltas(d, th), tv)


class TestIoU:
    def test_self_is_one(self):
        b = BoundingBox(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint_is_zero(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30)) == 0.0

    def test_third_overlap(self):
        v = iou(BoundingBox(0, 0, 10, 10), BoundingBox(0, 5, 10, 15))
        assert v == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b = int_box(rng), int_box(rng)
            va, vb = iou(a, b), iou(b, a)
            assert va == vb
            assert 0.0 <= va <= 1.0

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(5)
        boxes_a = [int_box(rng) for _ in range(12)]
        boxes_b = [int_box(rng) for _ in range(9)]
        m = pairwise_iou(boxes_a, boxes_b)
        assert m.shape == (12, 9)
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def nms_reference(boxes, scores, threshold):
    """Exhaustive greedy reference: scalar IoU, explicit suppression set."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


class TestNMS:
    def test_overlapping_pair_suppressed(self):
        boxes = [BoundingBox(0, 0, 10, 10), BoundingBox(0, 5, 10, 15)]
        assert nms(boxes, [0.9, 0.8], 0.3) == [0]

    def test_pair_kept_at_loose_threshold(self):
        boxes = [BoundingBox(0, 0, 10, 10), BoundingBox(0, 5, 10, 15)]
        assert nms(boxes, [0.9, 0.8], 0.7) == [0, 1]

    def test_single_box_kept(self):
        assert nms([BoundingBox(0, 0, 10, 10)], [0.1], 0.5) == [0]

    def test_length_mismatch(self):
        with pytest.raises(GeometryError):
            nms([BoundingBox(0, 0, 10, 10)], [0.1, 0.2], 0.5)

    def test_matches_reference(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            n = int(rng.integers(1, 20))
            boxes = [int_box(rng, size=40) for _ in range(n)]
            scores = rng.random(n).tolist()
            thr = float(rng.uniform(0.1, 0.9))
            assert nms(boxes, scores, thr) == nms_reference(boxes, scores, thr)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            n = int(rng.integers(2, 15))
            boxes = [int_box(rng, size=40) for _ in range(n)]
            scores = rng.random(n).tolist()
            lo = set(nms(boxes, scores, 0.3))
            hi = set(nms(boxes, scores, 0.8))
            assert lo <= hi

    def test_max_keep_is_prefix(self):
        rng = np.random.default_rng(19)
        for _ in range(30):
            n = int(rng.integers(3, 18))
            boxes = [int_box(rng, size=40) for _ in range(n)]
            scores = rng.random(n).tolist()
            full = nms(boxes, scores, 0.5)
            assert nms(boxes, scores, 0.5, max_keep=3) == full[:3]
