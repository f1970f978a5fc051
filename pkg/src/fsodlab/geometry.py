"""Axis-aligned box arithmetic: flips, delta sign correction, IoU, NMS.

Everything here is pure and stateless. Boxes use continuous corner
coordinates (x_min, y_min, x_max, y_max); area is (x_max-x_min)*(y_max-y_min)
with no +1 pixel convention, so flips are exact involutions whenever the
coordinates are exactly representable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised when a box, delta, or NMS input fails validation."""


class FlipKind(str, enum.Enum):
    NONE = "none"
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: Optional[int] = None

    def validate(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box: {self}")
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite coordinate in {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clipped(self, image_width: float, image_height: float) -> "BoundingBox":
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), image_width),
            y_min=min(max(self.y_min, 0.0), image_height),
            x_max=min(max(self.x_max, 0.0), image_width),
            y_max=min(max(self.y_max, 0.0), image_height),
        )


@dataclass(frozen=True)
class FlipTransform:
    kind: FlipKind
    image_width: float
    image_height: float


@dataclass(frozen=True)
class RegressionDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def validate(self) -> None:
        for v in (self.dx, self.dy, self.dw, self.dh):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite delta in {self}")


def flip_box(box: BoundingBox, t: FlipTransform) -> BoundingBox:
    """Reflect a box under the given flip. Width/height are preserved.

    Diagonal is the composition of horizontal and vertical reflection
    (a 180-degree point reflection about the image center).
    """
    box.validate()
    k = FlipKind(t.kind)
    if k is FlipKind.NONE:
        return box
    x_min, y_min, x_max, y_max = box.as_tuple()
    if k in (FlipKind.HORIZONTAL, FlipKind.DIAGONAL):
        x_min, x_max = t.image_width - x_max, t.image_width - x_min
    if k in (FlipKind.VERTICAL, FlipKind.DIAGONAL):
        y_min, y_max = t.image_height - y_max, t.image_height - y_min
    return replace(box, x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)


# (sign of dx, sign of dy) applied to the transformed branch's deltas to make
# them comparable to the untransformed branch; dw, dh never change sign.
DELTA_SIGNS = {
    FlipKind.NONE: (1.0, 1.0),
    FlipKind.HORIZONTAL: (-1.0, 1.0),
    FlipKind.VERTICAL: (1.0, -1.0),
    FlipKind.DIAGONAL: (-1.0, -1.0),
}


def correct_deltas(deltas_t: RegressionDelta, t: FlipTransform) -> RegressionDelta:
    """Sign-correct deltas predicted on a flipped image."""
    deltas_t.validate()
    sx, sy = DELTA_SIGNS[FlipKind(t.kind)]
    return RegressionDelta(sx * deltas_t.dx, sy * deltas_t.dy, deltas_t.dw, deltas_t.dh)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    a.validate()
    b.validate()
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _boxes_to_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise GeometryError(f"expected (N,4) box array, got {arr.shape}")
        return arr
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def pairwise_iou(a, b) -> np.ndarray:
    """(N, M) IoU matrix for two box collections (arrays or BoundingBox lists)."""
    a = _boxes_to_array(a)
    b = _boxes_to_array(b)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def nms(boxes, scores: Sequence[float], iou_threshold: float,
        max_keep: Optional[int] = None) -> list:
    """Greedy highest-score-first NMS.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_threshold``. Returns kept indices in descending score
    order (ties broken by original index). ``max_keep`` stops early once
    that many boxes are kept (the kept prefix is unchanged by the cap).
    """
    arr = _boxes_to_array(boxes)
    sc = np.asarray(scores, dtype=np.float64)
    if len(arr) != len(sc):
        raise GeometryError(f"boxes/scores length mismatch: {len(arr)} vs {len(sc)}")
    if not (0.0 < iou_threshold <= 1.0):
        raise GeometryError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if len(arr) == 0:
        return []
    order = np.argsort(-sc, kind="stable")
    x1, y1, x2, y2 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    kept = []
    while order.size > 0:
        i = order[0]
        kept.append(int(i))
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = order[1:]
        ix = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        iy = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        overlap = np.where(inter > 0.0, inter / (areas[i] + areas[rest] - inter), 0.0)
        order = rest[overlap <= iou_threshold]
    return kept
