"""Test-time detection and all metrics: VOC AP, nAP/bAP/mAP, Pearson
calibration, confusion matrix with background, and inference accounting.

Detection runs the query branch once per image and the RoI head once per
class (aggregating with that class's support prototype); the flipped branch
never exists at test time, so inference cost is independent of how the
model was trained.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import geometry
from .detector import FewShotDetector, clip_boxes, decode_boxes
from .geometry import BoundingBox
from .synthdata import ClassSplit


class MetricError(ValueError):
    pass


@dataclass
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float


@dataclass
class DetectionResult:
    image_id: int
    detections: List[Detection]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "detections": [
                {"x_min": d.box.x_min, "y_min": d.box.y_min,
                 "x_max": d.box.x_max, "y_max": d.box.y_max,
                 "class_id": d.class_id, "confidence": d.confidence}
                for d in self.detections
            ],
        }


DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_RPN_TEST_NMS = 0.9
DEFAULT_DET_NMS = 0.5
DEFAULT_MAX_DETECTIONS = 100


def detect_image(model: FewShotDetector, image, support_features: Dict[int, torch.Tensor],
                 score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                 nms_iou: float = DEFAULT_RPN_TEST_NMS,
                 det_nms_iou: float = DEFAULT_DET_NMS,
                 max_detections: int = DEFAULT_MAX_DETECTIONS,
                 max_proposals: int = 100,
                 image_id: int = 0) -> DetectionResult:
    """One query forward, then one head pass per class prototype.

    Per class: the head probability for that class scores each proposal,
    its class-specific delta refines the box, and per-class NMS filters.
    Classes do not suppress each other.
    """
    if not support_features:
        raise MetricError("support_features must not be empty")
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    h, w = image.shape[-2:]
    model.eval()
    with torch.no_grad():
        pyramid = model.extract_pyramid(image[None])
        props = model.propose(pyramid, (h, w), nms_iou=nms_iou,
                              max_proposals=max_proposals)
        boxes = props[0][0]
        detections: List[Detection] = []
        if boxes.shape[0] > 0:
            roi = model.roi_features(pyramid, [boxes])
            for cid in sorted(support_features):
                head = model.head(model.aggregate(roi, support_features[cid]))
                scores = head.cls_scores[:, cid]
                deltas = head.reg_deltas[:, cid]
                refined = clip_boxes(decode_boxes(boxes, deltas), float(w), float(h))
                keep = (scores >= score_threshold) & \
                    (refined[:, 2] - refined[:, 0] > 1e-3) & \
                    (refined[:, 3] - refined[:, 1] > 1e-3)
                if not bool(keep.any()):
                    continue
                kb = refined[keep].numpy()
                ks = scores[keep].numpy()
                for i in geometry.nms(kb, ks, det_nms_iou):
                    detections.append(Detection(
                        box=BoundingBox(*[float(v) for v in kb[i]], class_id=cid),
                        class_id=cid, confidence=float(ks[i]),
                    ))
    detections.sort(key=lambda d: -d.confidence)
    return DetectionResult(image_id=image_id, detections=detections[:max_detections])


# ---------------------------------------------------------------------------
# metrics


def _match_tp_fp(detections: Sequence[DetectionResult],
                 ground_truth: Dict[int, Sequence[BoundingBox]],
                 class_id: int, iou_match_threshold: float,
                 ) -> Tuple[np.ndarray, np.ndarray, int]:
    """Greedy descending-confidence matching for one class; each ground
    truth box matches at most once, a match needs IoU >= threshold."""
    gt_by_image = {
        iid: [b for b in boxes if b.class_id == class_id]
        for iid, boxes in ground_truth.items()
    }
    npos = sum(len(v) for v in gt_by_image.values())
    dets = [
        (r.image_id, d) for r in detections for d in r.detections
        if d.class_id == class_id
    ]
    dets.sort(key=lambda t: -t[1].confidence)
    matched: Dict[int, set] = {iid: set() for iid in gt_by_image}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, (iid, det) in enumerate(dets):
        gts = gt_by_image.get(iid, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            v = geometry.iou(det.box, g)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_match_threshold and best_j not in matched[iid]:
            matched[iid].add(best_j)
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    return tp, fp, npos


def pr_curve(detections: Sequence[DetectionResult],
             ground_truth: Dict[int, Sequence[BoundingBox]],
             class_id: int, iou_match_threshold: float = 0.5,
             ) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(recall, precision) arrays over descending-confidence detections."""
    tp, fp, npos = _match_tp_fp(detections, ground_truth, class_id, iou_match_threshold)
    if npos == 0:
        return None
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    return recall, precision


def voc_ap(detections: Sequence[DetectionResult],
           ground_truth: Dict[int, Sequence[BoundingBox]],
           class_id: int, iou_match_threshold: float = 0.5) -> Optional[float]:
    """VOC average precision for one class: area under the all-points
    interpolated precision-recall curve. Returns None (with a warning)
    when the class has no ground truth."""
    curve = pr_curve(detections, ground_truth, class_id, iou_match_threshold)
    if curve is None:
        warnings.warn(f"class {class_id} absent from ground truth; AP undefined")
        return None
    recall, precision = curve
    if len(recall) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def pcc(ious: Sequence[float], confidences: Sequence[float]) -> float:
    """Pearson correlation between per-detection best-GT IoU and confidence."""
    x = np.asarray(ious, dtype=np.float64)
    y = np.asarray(confidences, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise MetricError(f"need two equal-length sequences of >= 2 values, "
                          f"got {x.shape} and {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0.0:
        raise MetricError("correlation undefined: an input sequence is constant")
    return float((dx * dy).sum() / denom)


def confusion_matrix(detections: Sequence[DetectionResult],
                     ground_truth: Dict[int, Sequence[BoundingBox]],
                     classes: Sequence[int],
                     iou_match_threshold: float = 0.5) -> np.ndarray:
    """(C+1)x(C+1) count matrix; the final row/column is background.

    Per image, detections (all classes, descending confidence) match
    class-agnostically to unmatched ground truth at IoU >= threshold.
    Unmatched ground truth counts as (gt -> background); unmatched
    detections count as (background -> prediction).
    """
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    bg = len(classes)
    m = np.zeros((bg + 1, bg + 1), dtype=np.int64)
    det_by_image = {r.image_id: r.detections for r in detections}
    for iid, gts in ground_truth.items():
        gts = list(gts)
        taken = set()
        for det in sorted(det_by_image.get(iid, []), key=lambda d: -d.confidence):
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(gts):
                if j in taken:
                    continue
                v = geometry.iou(det.box, g)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_match_threshold:
                taken.add(best_j)
                m[index[gts[best_j].class_id], index[det.class_id]] += 1
            else:
                m[bg, index[det.class_id]] += 1
        for j, g in enumerate(gts):
            if j not in taken:
                m[index[g.class_id], bg] += 1
    return m


def row_normalize_percent(m: np.ndarray) -> np.ndarray:
    """Rows as percentages; rows with no mass stay all-zero."""
    sums = m.sum(axis=1, keepdims=True).astype(np.float64)
    out = np.zeros(m.shape, dtype=np.float64)
    nz = sums[:, 0] > 0
    out[nz] = 100.0 * m[nz] / sums[nz]
    return out


@dataclass
class EvalReport:
    per_class_ap: Dict[int, Optional[float]]
    nAP: Optional[float]
    bAP: Optional[float]
    mAP: Optional[float]
    pcc: Optional[float]
    confusion: np.ndarray            # raw counts, (C+1, C+1)
    timing_images_per_s: Optional[float] = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "nAP": self.nAP, "bAP": self.bAP, "mAP": self.mAP, "pcc": self.pcc,
            "confusion_counts": self.confusion.tolist(),
            "confusion_row_percent": row_normalize_percent(self.confusion).tolist(),
        }
        if include_timing:
            d["timing_images_per_s"] = self.timing_images_per_s
        return d


def _mean_of(values: List[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def aggregate_report(per_class_ap: Dict[int, Optional[float]], split: ClassSplit,
                     pcc_inputs: Optional[Tuple[Sequence[float], Sequence[float]]],
                     confusion: np.ndarray,
                     timing_images_per_s: Optional[float] = None) -> EvalReport:
    """Means over novel/base/all classes plus calibration and confusion."""
    n_ap = _mean_of([per_class_ap[c] for c in sorted(split.novel_class_ids)
                     if c in per_class_ap])
    b_ap = _mean_of([per_class_ap[c] for c in sorted(split.base_class_ids)
                     if c in per_class_ap])
    m_ap = _mean_of(list(per_class_ap.values()))
    p = None
    if pcc_inputs is not None:
        x, y = pcc_inputs
        try:
            p = pcc(x, y)
        except MetricError:
            p = None
    return EvalReport(per_class_ap=dict(per_class_ap), nAP=n_ap, bAP=b_ap, mAP=m_ap,
                      pcc=p, confusion=confusion, timing_images_per_s=timing_images_per_s)


# ---------------------------------------------------------------------------
# full-set evaluation


def evaluate_items(model: FewShotDetector,
                   items: Sequence[Tuple[np.ndarray, Sequence[BoundingBox]]],
                   support_features: Dict[int, torch.Tensor],
                   split: ClassSplit,
                   score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                   nms_iou: float = DEFAULT_RPN_TEST_NMS) -> Tuple[EvalReport, List[DetectionResult]]:
    """Detect every item, then compute the full report.

    PCC inputs are all emitted detections: x is each detection's best IoU
    against same-class ground truth in its image, y its confidence.
    """
    results: List[DetectionResult] = []
    ground_truth: Dict[int, List[BoundingBox]] = {}
    t0 = time.perf_counter()
    for i, (image, gt) in enumerate(items):
        results.append(detect_image(model, image, support_features,
                                    score_threshold=score_threshold,
                                    nms_iou=nms_iou, image_id=i))
        ground_truth[i] = list(gt)
    elapsed = time.perf_counter() - t0
    classes = sorted(split.all_class_ids)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_class = {c: voc_ap(results, ground_truth, c) for c in classes}

    xs, ys = [], []
    for r in results:
        gts = ground_truth[r.image_id]
        for d in r.detections:
            same = [g for g in gts if g.class_id == d.class_id]
            best = max((geometry.iou(d.box, g) for g in same), default=0.0)
            xs.append(best)
            ys.append(d.confidence)

    conf = confusion_matrix(results, ground_truth, classes)
    report = aggregate_report(
        per_class, split, (xs, ys) if xs else None, conf,
        timing_images_per_s=len(items) / elapsed if elapsed > 0 else None,
    )
    return report, results


def write_detections_jsonl(path: str, results: Sequence[DetectionResult]) -> None:
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# inference accounting


class ForwardCounter:
    """Counts nn.Module forward invocations while active; grounds the claim
    that training method does not change the inference graph."""

    def __init__(self, model: torch.nn.Module):
        self.model = model
        self.counts: Dict[str, int] = {}
        self._handles = []

    def __enter__(self) -> "ForwardCounter":
        for name, mod in self.model.named_modules():
            if name == "":
                continue
            def hook(module, args, output, _name=name):
                self.counts[_name] = self.counts.get(_name, 0) + 1
            self._handles.append(mod.register_forward_hook(hook))
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()
        return False

    @property
    def total(self) -> int:
        return sum(self.counts.values())
