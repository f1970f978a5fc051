"""Detection metrics: VOC AP vs a brute-force oracle, calibration PCC,
confusion matrices, report aggregation, and the test-time detect path."""

import itertools

import numpy as np
import pytest
import torch

from fsodlab.detector import ModelConfig
from fsodlab.evaluator import (
    Detection,
    DetectionResult,
    EvalReport,
    ForwardCounter,
    MetricError,
    aggregate_report,
    confusion_matrix,
    detect_image,
    pcc,
    pr_curve,
    row_normalize_percent,
    voc_ap,
)
from fsodlab.geometry import BoundingBox
from fsodlab.synthdata import ClassSplit
from fsodlab.trainer import build_model


def det(x1, y1, x2, y2, cid, conf):
    return Detection(BoundingBox(x1, y1, x2, y2), cid, conf)


def gt(x1, y1, x2, y2, cid):
    return BoundingBox(x1, y1, x2, y2, class_id=cid)


def ap_oracle(detections, ground_truth, class_id, thr=0.5):
    """Brute-force AP: enumerate the PR curve point by point with scalar
    greedy matching, then integrate the all-points interpolated curve."""
    from fsodlab.geometry import iou as siou

    dets = []
    for res in detections:
        for d in res.detections:
            if d.class_id == class_id:
                dets.append((res.image_id, d))
    dets.sort(key=lambda p: -p[1].confidence)
    gts = {img: [b for b in boxes if b.class_id == class_id]
           for img, boxes in ground_truth.items()}
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None
    matched = {img: [False] * len(v) for img, v in gts.items()}
    points = []
    tp = fp = 0
    for img, d in dets:
        cands = gts.get(img, [])
        best, best_iou = -1, thr
        for j, g in enumerate(cands):
            v = siou(d.box, g)
            if v >= best_iou and not matched[img][j]:
                best, best_iou = j, v
        if best >= 0:
            matched[img][best] = True
            tp += 1
        else:
            fp += 1
        points.append((tp / npos, tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for i, (r, _p) in enumerate(points):
        if r == prev_r:
            continue
        best_p = max(p for rr, p in points[i:])
        ap += (r - prev_r) * best_p
        prev_r = r
    return ap


def random_instance(rng):
    """A small random detection/GT scenario over 2 images and 2 classes."""
    ground = {}
    results = []
    for img in range(2):
        boxes = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.integers(0, 80, size=2)
            w, h = rng.integers(5, 30, size=2)
            boxes.append(gt(float(x), float(y), float(x + w), float(y + h),
                            int(rng.integers(0, 2))))
        ground[img] = boxes
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            if boxes and rng.random() < 0.6:
                b = boxes[int(rng.integers(0, len(boxes)))]
                jitter = rng.normal(0, 4, size=4)
                xs = sorted([b.x_min + jitter[0], b.x_max + jitter[2]])
                ys = sorted([b.y_min + jitter[1], b.y_max + jitter[3]])
                cand = BoundingBox(xs[0], ys[0], max(xs[1], xs[0] + 1), max(ys[1], ys[0] + 1))
                dets.append(Detection(cand, int(rng.integers(0, 2)), float(rng.random())))
            else:
                x, y = rng.integers(0, 80, size=2)
                w, h = rng.integers(5, 30, size=2)
                dets.append(det(float(x), float(y), float(x + w), float(y + h),
                                int(rng.integers(0, 2)), float(rng.random())))
        results.append(DetectionResult(image_id=img, detections=dets))
    return results, ground


class TestVocAp:
    def test_perfect_single_detection(self):
        ground = {0: [gt(10, 10, 50, 50, 0)]}
        res = [DetectionResult(0, [det(11, 11, 49, 49, 0, 0.9)])]
        assert voc_ap(res, ground, 0) == 1.0

    def test_low_iou_no_match(self):
        ground = {0: [gt(10, 10, 50, 50, 0)]}
        res = [DetectionResult(0, [det(40, 40, 90, 90, 0, 0.9)])]
        assert voc_ap(res, ground, 0) == 0.0

    def test_hit_miss_hit_sequence(self):
        ground = {0: [gt(0, 0, 20, 20, 0), gt(50, 50, 70, 70, 0)]}
        res = [DetectionResult(0, [
            det(0, 0, 20, 20, 0, 0.9),     # hit
            det(90, 90, 110, 110, 0, 0.8),  # miss
            det(50, 50, 70, 70, 0, 0.7),    # hit
        ])]
        ap = voc_ap(res, ground, 0)
        assert ap == pytest.approx(ap_oracle(res, ground, 0), abs=1e-12)
        # precision points: 1/1 at recall .5, then 2/3 at recall 1
        assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)

    def test_absent_class_is_none_with_warning(self):
        ground = {0: [gt(0, 0, 20, 20, 0)]}
        res = [DetectionResult(0, [det(0, 0, 20, 20, 1, 0.9)])]
        with pytest.warns(UserWarning):
            assert voc_ap(res, ground, 1) is None

    def test_no_detections_is_zero(self):
        ground = {0: [gt(0, 0, 20, 20, 0)]}
        assert voc_ap([DetectionResult(0, [])], ground, 0) == 0.0

    def test_matches_oracle_on_random_instances(self):
        import warnings as w
        rng = np.random.default_rng(0)
        for _ in range(150):
            res, ground = random_instance(rng)
            for cid in (0, 1):
                with w.catch_warnings():
                    w.simplefilter("ignore", UserWarning)
                    ours = voc_ap(res, ground, cid)
                ref = ap_oracle(res, ground, cid)
                if ref is None:
                    assert ours is None or not any(
                        b.class_id == cid for v in ground.values() for b in v)
                else:
                    assert ours == pytest.approx(ref, abs=1e-12)

    def test_removing_trailing_fp_never_lowers_ap(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            res, ground = random_instance(rng)
            if not any(b.class_id == 0 for v in ground.values() for b in v):
                continue
            base = voc_ap(res, ground, 0)
            trimmed = [DetectionResult(r.image_id,
                                       [d for d in r.detections
                                        if not (d.class_id == 0 and d.confidence < 0.05)])
                       for r in res]
            # append a guaranteed FP below every existing score instead
            padded = [DetectionResult(r.image_id, list(r.detections)) for r in res]
            padded[0].detections.append(det(500, 500, 520, 520, 0, 1e-6))
            assert voc_ap(padded, ground, 0) <= base + 1e-12
            del trimmed

    def test_pr_curve_none_without_gt(self):
        assert pr_curve([DetectionResult(0, [])], {0: []}, 0) is None


class TestPcc:
    def test_exact_linearity(self):
        assert pcc([0.2, 0.4, 0.6], [0.1, 0.2, 0.3]) == pytest.approx(1.0, abs=1e-12)

    def test_worked_half_case(self):
        assert pcc([0, 1, 1], [0, 0, 1]) == pytest.approx(0.5, abs=1e-12)

    def test_matches_two_pass_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.random(20)
            y = rng.random(20)
            mx, my = x.mean(), y.mean()
            ref = ((x - mx) * (y - my)).sum() / np.sqrt(
                ((x - mx) ** 2).sum() * ((y - my) ** 2).sum())
            assert pcc(x.tolist(), y.tolist()) == pytest.approx(ref, abs=1e-9)

    def test_constant_input_errors(self):
        with pytest.raises(MetricError):
            pcc([0.5, 0.5, 0.5], [0.1, 0.2, 0.3])

    def test_too_short_errors(self):
        with pytest.raises(MetricError):
            pcc([0.5], [0.1])


class TestConfusion:
    def test_perfect_detector_identity(self):
        ground = {0: [gt(0, 0, 20, 20, 0), gt(50, 50, 80, 80, 1)]}
        res = [DetectionResult(0, [det(0, 0, 20, 20, 0, 0.9),
                                   det(50, 50, 80, 80, 1, 0.9)])]
        m = confusion_matrix(res, ground, classes=[0, 1])
        assert m[0, 0] == 1 and m[1, 1] == 1
        assert m[0, 1] == 0 and m[1, 0] == 0
        assert m[0, 2] == 0 and m[1, 2] == 0

    def test_zero_detections_all_background(self):
        ground = {0: [gt(0, 0, 20, 20, 0), gt(50, 50, 80, 80, 1)]}
        m = confusion_matrix([DetectionResult(0, [])], ground, classes=[0, 1])
        assert m[0, 2] == 1 and m[1, 2] == 1
        assert m[:, :2].sum() == 0

    def test_hand_counted_three_class_scenario(self):
        # one GT per class; class 0 detected correctly, class 1 detected as
        # class 2 (cross-class mistake), class 2 missed; one stray FP class 0.
        ground = {0: [gt(0, 0, 20, 20, 0), gt(40, 40, 60, 60, 1), gt(80, 80, 100, 100, 2)]}
        res = [DetectionResult(0, [
            det(0, 0, 20, 20, 0, 0.9),
            det(40, 40, 60, 60, 2, 0.8),
            det(200, 200, 220, 220, 0, 0.7),
        ])]
        m = confusion_matrix(res, ground, classes=[0, 1, 2])
        assert m[0, 0] == 1
        assert m[1, 2] == 1    # gt 1 predicted as class 2
        assert m[2, 3] == 1    # gt 2 unmatched -> background column
        assert m[3, 0] == 1    # stray detection from background row
        assert m.sum() == 4

    def test_row_normalization(self):
        rng = np.random.default_rng(3)
        m = rng.integers(0, 9, size=(4, 4)).astype(float)
        m[2] = 0  # empty rows stay zero instead of dividing by zero
        norm = row_normalize_percent(m)
        sums = norm.sum(axis=1)
        for i, s in enumerate(sums):
            if m[i].sum() > 0:
                assert s == pytest.approx(100.0, abs=1e-6)
            else:
                assert s == 0.0


class TestAggregateReport:
    def split(self):
        return ClassSplit(frozenset({1}), frozenset({0}))

    def test_means(self):
        r = aggregate_report({0: 0.4, 1: 0.8}, self.split(), None, np.zeros((3, 3)))
        assert r.nAP == pytest.approx(0.4)
        assert r.bAP == pytest.approx(0.8)
        assert r.mAP == pytest.approx(0.6)

    def test_all_novel_map_equals_nap(self):
        split = ClassSplit(frozenset(), frozenset({0, 1}))
        r = aggregate_report({0: 0.2, 1: 0.6}, split, None, np.zeros((3, 3)))
        assert r.mAP == r.nAP == pytest.approx(0.4)
        assert r.bAP is None

    def test_undefined_class_excluded(self):
        r = aggregate_report({0: None, 1: 0.8}, self.split(), None, np.zeros((3, 3)))
        assert r.nAP is None
        assert r.mAP == pytest.approx(0.8)

    def test_random_means_match_recompute(self):
        rng = np.random.default_rng(4)
        novel = frozenset(range(5))
        base = frozenset(range(5, 20))
        split = ClassSplit(base, novel)
        aps = {c: float(rng.random()) for c in range(20)}
        r = aggregate_report(aps, split, None, np.zeros((21, 21)))
        assert r.nAP == pytest.approx(np.mean([aps[c] for c in sorted(novel)]))
        assert r.bAP == pytest.approx(np.mean([aps[c] for c in sorted(base)]))
        assert r.mAP == pytest.approx(np.mean(list(aps.values())))

    def test_report_json_excludes_timing(self):
        r = aggregate_report({0: 0.4, 1: 0.8}, self.split(), None,
                             np.zeros((3, 3)), timing_images_per_s=12.5)
        assert "timing_images_per_s" not in r.to_dict()
        assert "timing_images_per_s" in r.to_dict(include_timing=True)


@pytest.fixture(scope="module")
def eval_model():
    return build_model(ModelConfig(num_classes=3), seed=0)


class TestDetectImage:

    def support(self, model, n):
        torch.manual_seed(0)
        with torch.no_grad():
            vecs = model.support_vectors(torch.rand((n, 4, 64, 64)))
        return {i: vecs[i] for i in range(n)}

    def test_high_threshold_empty(self, eval_model):
        model = eval_model
        img = np.random.default_rng(0).random((3, 128, 128), dtype=np.float32)
        res = detect_image(model, img, self.support(model, 3), score_threshold=1.0)
        assert res.detections == []

    def test_head_invoked_once_per_class(self, eval_model):
        model = eval_model
        img = np.random.default_rng(1).random((3, 128, 128), dtype=np.float32)
        sup = self.support(model, 3)
        with ForwardCounter(model) as counter:
            detect_image(model, img, sup)
        head_calls = counter.counts.get("roi_head", 0)
        assert head_calls == 3

    def test_detections_within_bounds_and_scored(self, eval_model):
        model = eval_model
        img = np.random.default_rng(2).random((3, 128, 128), dtype=np.float32)
        res = detect_image(model, img, self.support(model, 3), score_threshold=0.0)
        for d in res.detections:
            assert 0.0 <= d.confidence <= 1.0
            assert 0 <= d.box.x_min < d.box.x_max <= 128
            assert 0 <= d.box.y_min < d.box.y_max <= 128

    def test_deterministic(self, eval_model):
        model = eval_model
        img = np.random.default_rng(3).random((3, 128, 128), dtype=np.float32)
        sup = self.support(model, 3)
        a = detect_image(model, img, sup)
        b = detect_image(model, img, sup)
        assert a.to_dict() == b.to_dict()
