"""Deterministic synthetic detection dataset: shape objects on textured noise.

Stands in for large remote-sensing benchmarks at desk scale. Each image's
randomness derives from (seed, image_index), so serial and parallel
generation produce identical bytes.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from PIL import Image

from .geometry import BoundingBox, FlipKind, FlipTransform, flip_box, pairwise_iou

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    pass


class ShapeFamily(str, enum.Enum):
    CROSS = "cross"        # airplane-like: long body, offset wings
    DISC = "disc"          # tank-like filled disc
    RECT = "rect"          # court-like rectangle
    BAR = "bar"            # ship-like elongated bar with offset block
    TRIBLADE = "triblade"  # windmill-like three blades


class OrientationPolicy(str, enum.Enum):
    AXIS_ALIGNED = "axis-aligned"
    FOURFOLD = "fourfold"      # random multiple of 90 degrees
    CONTINUOUS = "continuous"  # random angle in [0, 2*pi)


@dataclass(frozen=True)
class SyntheticClassSpec:
    class_id: int
    name: str
    shape_family: ShapeFamily
    scale_range: Tuple[int, int]
    orientation_policy: OrientationPolicy

    def validate(self, image_size: int) -> None:
        lo, hi = self.scale_range
        if lo < 8:
            raise DatasetError(f"class {self.name!r}: scale_range min {lo} < 8 px")
        if hi > image_size // 2:
            raise DatasetError(
                f"class {self.name!r}: scale_range max {hi} > image_size/2 ({image_size // 2})"
            )
        if lo > hi:
            raise DatasetError(f"class {self.name!r}: empty scale_range {self.scale_range}")


@dataclass(frozen=True)
class ClassSplit:
    base_class_ids: frozenset
    novel_class_ids: frozenset

    def __post_init__(self):
        overlap = set(self.base_class_ids) & set(self.novel_class_ids)
        if overlap:
            raise DatasetError(f"base/novel class sets overlap: {sorted(overlap)}")

    @property
    def all_class_ids(self) -> Set[int]:
        return set(self.base_class_ids) | set(self.novel_class_ids)

    def to_dict(self) -> dict:
        return {
            "base_class_ids": sorted(self.base_class_ids),
            "novel_class_ids": sorted(self.novel_class_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassSplit":
        return ClassSplit(
            base_class_ids=frozenset(d["base_class_ids"]),
            novel_class_ids=frozenset(d["novel_class_ids"]),
        )


@dataclass
class ImageRecord:
    image_id: int
    path: str
    annotations: List[BoundingBox]


@dataclass
class DatasetManifest:
    seed: int
    image_size: int
    class_names: List[str]
    images: List[ImageRecord]
    long_tail_exponent: float = 0.0
    version: int = MANIFEST_VERSION
    root: Optional[str] = None  # directory holding images/; not serialized

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "image_size": self.image_size,
            "class_names": self.class_names,
            "long_tail_exponent": self.long_tail_exponent,
            "images": [
                {
                    "id": rec.image_id,
                    "path": rec.path,
                    "annotations": [
                        {
                            "x_min": b.x_min,
                            "y_min": b.y_min,
                            "x_max": b.x_max,
                            "y_max": b.y_max,
                            "class_id": b.class_id,
                        }
                        for b in rec.annotations
                    ],
                }
                for rec in self.images
            ],
        }

    def save(self, root: str) -> str:
        path = os.path.join(root, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")
        return path

    @staticmethod
    def load(root_or_path: str) -> "DatasetManifest":
        path = root_or_path
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path) as f:
            d = json.load(f)
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version: {d.get('version')}")
        images = [
            ImageRecord(
                image_id=e["id"],
                path=e["path"],
                annotations=[
                    BoundingBox(a["x_min"], a["y_min"], a["x_max"], a["y_max"], a["class_id"])
                    for a in e["annotations"]
                ],
            )
            for e in d["images"]
        ]
        return DatasetManifest(
            seed=d["seed"],
            image_size=d["image_size"],
            class_names=d["class_names"],
            images=images,
            long_tail_exponent=d.get("long_tail_exponent", 0.0),
            root=os.path.dirname(os.path.abspath(path)),
        )

    def class_instance_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {i: 0 for i in range(len(self.class_names))}
        for rec in self.images:
            for b in rec.annotations:
                counts[b.class_id] = counts.get(b.class_id, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# rasterization


def _shape_mask(family: ShapeFamily, size: float, angle: float,
                cx: float, cy: float, image_size: int) -> np.ndarray:
    """Boolean mask of one object. ``size`` is the longest extent in pixels."""
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    # rotate into the shape's local frame
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
    h = size / 2.0
    if family is ShapeFamily.DISC:
        return u * u + v * v <= h * h
    if family is ShapeFamily.RECT:
        return (np.abs(u) <= h) & (np.abs(v) <= h * 0.62)
    if family is ShapeFamily.BAR:
        body = (np.abs(u) <= h) & (np.abs(v) <= h * 0.22)
        block = (np.abs(u - 0.55 * h) <= 0.2 * h) & (np.abs(v) <= 0.45 * h)
        return body | block
    if family is ShapeFamily.CROSS:
        fuselage = (np.abs(u) <= h) & (np.abs(v) <= h * 0.16)
        wings = (np.abs(u - 0.3 * h) <= 0.14 * h) & (np.abs(v) <= h * 0.9)
        tail = (np.abs(u + 0.85 * h) <= 0.12 * h) & (np.abs(v) <= h * 0.4)
        return fuselage | wings | tail
    if family is ShapeFamily.TRIBLADE:
        mask = u * u + v * v <= (0.14 * h) ** 2
        for k in range(3):
            a = 2.0 * np.pi * k / 3.0
            bu = u * np.cos(a) + v * np.sin(a)
            bv = -u * np.sin(a) + v * np.cos(a)
            blade = (bu >= 0.0) & (bu <= h) & (np.abs(bv - 0.12 * bu) <= 0.10 * h)
            mask |= blade
        return mask
    raise DatasetError(f"unknown shape family: {family}")


def _mask_bbox(mask: np.ndarray, class_id: int) -> Optional[BoundingBox]:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    return BoundingBox(
        x_min=float(xs.min()), y_min=float(ys.min()),
        x_max=float(xs.max() + 1), y_max=float(ys.max() + 1),
        class_id=class_id,
    )


def _background(rng: np.random.Generator, image_size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.45, size=3)
    coarse = rng.normal(0.0, 0.06, size=(8, 8, 3))
    idx = np.linspace(0, 7, image_size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 7)
    w = idx - i0
    rows = coarse[i0] * (1 - w)[:, None, None] + coarse[i1] * w[:, None, None]
    tex = rows[:, i0] * (1 - w)[None, :, None] + rows[:, i1] * w[None, :, None]
    img = base[None, None, :] + tex
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


_CLASS_COLORS = np.array([
    [0.85, 0.80, 0.75],
    [0.35, 0.55, 0.30],
    [0.70, 0.45, 0.30],
    [0.45, 0.50, 0.75],
    [0.80, 0.70, 0.35],
    [0.60, 0.35, 0.60],
    [0.30, 0.65, 0.65],
    [0.75, 0.40, 0.45],
])


def _pick_angle(policy: OrientationPolicy, rng: np.random.Generator) -> float:
    if policy is OrientationPolicy.AXIS_ALIGNED:
        return 0.0
    if policy is OrientationPolicy.FOURFOLD:
        return float(rng.integers(0, 4)) * np.pi / 2.0
    return float(rng.uniform(0.0, 2.0 * np.pi))


def _render_image(specs: Sequence[SyntheticClassSpec], image_size: int,
                  class_probs: np.ndarray, rng: np.random.Generator,
                  max_objects: int = 6, max_iou: float = 0.3,
                  retries: int = 40) -> Tuple[np.ndarray, List[BoundingBox]]:
    img = _background(rng, image_size)
    n_objects = int(rng.integers(1, max_objects + 1))
    placed: List[BoundingBox] = []
    for obj_idx in range(n_objects):
        ok = False
        for _ in range(retries):
            spec = specs[int(rng.choice(len(specs), p=class_probs))]
            lo, hi = spec.scale_range
            size = float(rng.uniform(lo, hi))
            angle = _pick_angle(spec.orientation_policy, rng)
            margin = size / 2.0 + 1.0
            if image_size - margin <= margin:
                continue
            cx = float(rng.uniform(margin, image_size - margin))
            cy = float(rng.uniform(margin, image_size - margin))
            mask = _shape_mask(spec.shape_family, size, angle, cx, cy, image_size)
            box = _mask_bbox(mask, spec.class_id)
            if box is None or box.width < 4 or box.height < 4:
                continue
            if placed and pairwise_iou([box], placed).max() > max_iou:
                continue
            color = _CLASS_COLORS[spec.class_id % len(_CLASS_COLORS)]
            jitter = rng.normal(0.0, 0.04, size=3)
            shade = 1.0 + rng.normal(0.0, 0.05, size=mask.sum().item())
            img[mask] = np.clip(color[None, :] * shade[:, None] + jitter[None, :], 0.0, 1.0)
            placed.append(box)
            ok = True
            break
        if not ok and obj_idx == 0:
            raise DatasetError(
                f"could not place any object after {retries} retries; "
                f"check scale ranges of specs {[s.name for s in specs]}"
            )
    return img, placed


def long_tail_probs(n_classes: int, exponent: float) -> np.ndarray:
    """Class sampling weights proportional to (rank+1)^-exponent."""
    w = (np.arange(n_classes) + 1.0) ** (-float(exponent))
    return w / w.sum()


def generate_dataset(specs: Sequence[SyntheticClassSpec], n_images: int,
                     image_size: int, seed: int, out_dir: str,
                     long_tail_exponent: float = 0.0) -> DatasetManifest:
    """Render ``n_images`` images plus a JSON manifest under ``out_dir``."""
    if n_images < 1:
        raise DatasetError("n_images must be >= 1")
    if len(specs) < 2:
        raise DatasetError("need at least 2 class specs")
    ids = [s.class_id for s in specs]
    if ids != list(range(len(specs))):
        raise DatasetError(f"class_ids must be 0..{len(specs) - 1} in order, got {ids}")
    for s in specs:
        s.validate(image_size)
    probs = long_tail_probs(len(specs), long_tail_exponent)

    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        img, boxes = _render_image(specs, image_size, probs, rng)
        rel = os.path.join("images", f"{i:05d}.png")
        arr = (img * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(out_dir, rel))
        records.append(ImageRecord(image_id=i, path=rel, annotations=boxes))

    manifest = DatasetManifest(
        seed=seed, image_size=image_size,
        class_names=[s.name for s in specs],
        images=records, long_tail_exponent=long_tail_exponent,
        root=os.path.abspath(out_dir),
    )
    manifest.save(out_dir)
    return manifest


def specs_from_config(classes: Sequence[dict]) -> List[SyntheticClassSpec]:
    return [
        SyntheticClassSpec(
            class_id=c["class_id"],
            name=c["name"],
            shape_family=ShapeFamily(c["shape_family"]),
            scale_range=tuple(c["scale_range"]),
            orientation_policy=OrientationPolicy(c["orientation_policy"]),
        )
        for c in classes
    ]


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class InstanceRef:
    """One annotated object: (image_id, index into that image's annotations)."""
    image_id: int
    ann_index: int


@dataclass
class DatasetSplits:
    split: ClassSplit
    k_shots: int
    base_images: List[ImageRecord]
    finetune_instances: List[InstanceRef]
    test_images: List[ImageRecord]


def split_dataset(manifest: DatasetManifest, split: ClassSplit, k_shots: int,
                  seed: int, test_fraction: float = 0.25) -> DatasetSplits:
    """Carve base / K-shot finetune / test sets out of a manifest.

    Test images are held out first; the finetune set draws exactly
    ``k_shots`` instances per class (base and novel) from the remainder, so
    it is image-disjoint from the test set by construction. Images containing
    any novel-class object are excluded from the base set entirely.
    """
    known = set(range(len(manifest.class_names)))
    unknown = split.all_class_ids - known
    if unknown:
        raise DatasetError(f"split references unknown class ids: {sorted(unknown)}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xde5,)))

    order = rng.permutation(len(manifest.images))
    n_test = int(round(test_fraction * len(manifest.images)))
    test_idx = set(order[:n_test].tolist())
    test_images = [manifest.images[i] for i in sorted(test_idx)]
    train_images = [manifest.images[i] for i in range(len(manifest.images)) if i not in test_idx]

    base_ids = set(split.base_class_ids)
    base_images = [
        rec for rec in train_images
        if rec.annotations and all(b.class_id in base_ids for b in rec.annotations)
    ]

    per_class: Dict[int, List[InstanceRef]] = {c: [] for c in sorted(split.all_class_ids)}
    for rec in train_images:
        for j, b in enumerate(rec.annotations):
            if b.class_id in per_class:
                per_class[b.class_id].append(InstanceRef(rec.image_id, j))

    finetune: List[InstanceRef] = []
    for c in sorted(per_class):
        pool = per_class[c]
        if len(pool) < k_shots:
            raise DatasetError(
                f"class {manifest.class_names[c]!r} (id {c}) has only {len(pool)} "
                f"instances outside the test set; need k_shots={k_shots}"
            )
        chosen = rng.choice(len(pool), size=k_shots, replace=False)
        finetune.extend(pool[i] for i in sorted(chosen.tolist()))

    return DatasetSplits(
        split=split, k_shots=k_shots,
        base_images=base_images,
        finetune_instances=finetune,
        test_images=test_images,
    )


# ---------------------------------------------------------------------------
# image loading and flip views


def load_image(manifest: DatasetManifest, rec: ImageRecord) -> np.ndarray:
    """Load an image as float32 CHW in [0, 1]."""
    if manifest.root is None:
        raise DatasetError("manifest has no root directory; load it from disk first")
    arr = np.asarray(Image.open(os.path.join(manifest.root, rec.path)).convert("RGB"))
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def flip_image(image_chw: np.ndarray, kind: FlipKind) -> np.ndarray:
    kind = FlipKind(kind)
    if kind is FlipKind.NONE:
        return image_chw
    axes = {
        FlipKind.HORIZONTAL: (2,),
        FlipKind.VERTICAL: (1,),
        FlipKind.DIAGONAL: (1, 2),
    }[kind]
    return np.ascontiguousarray(np.flip(image_chw, axis=axes))


def flip_record(image_chw: np.ndarray, boxes: Sequence[BoundingBox],
                kind: FlipKind) -> Tuple[np.ndarray, List[BoundingBox]]:
    h, w = image_chw.shape[1], image_chw.shape[2]
    t = FlipTransform(kind=FlipKind(kind), image_width=w, image_height=h)
    return flip_image(image_chw, kind), [flip_box(b, t) for b in boxes]


def randomly_flipped_view(manifest: DatasetManifest, records: Sequence[ImageRecord],
                          seed: int) -> List[Tuple[np.ndarray, List[BoundingBox]]]:
    """Load records and apply an independent uniform-random flip to each."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xf11b,)))
    kinds = list(FlipKind)
    out = []
    for rec in records:
        img = load_image(manifest, rec)
        kind = kinds[int(rng.integers(0, len(kinds)))]
        out.append(flip_record(img, rec.annotations, kind))
    return out


# ---------------------------------------------------------------------------
# external data


def manifest_from_records(root: str, class_names: Sequence[str],
                          records: Sequence[dict]) -> DatasetManifest:
    """Map an externally produced annotation list onto a DatasetManifest.

    Intended as the adapter point for real remote-sensing archives. Each
    record is a dict::

        {"id": int, "path": "images/xxx.png",
         "annotations": [{"x_min": ..., "y_min": ..., "x_max": ..., "y_max": ...,
                          "class_id": int}, ...]}

    with paths relative to ``root`` and pixel-space corner coordinates.
    All images must share one square size (pass it as the max dimension and
    pad smaller images yourself). This function has not been exercised
    against any real archive; it only performs the schema mapping.
    """
    images = []
    size = 0
    for r in records:
        anns = [BoundingBox(a["x_min"], a["y_min"], a["x_max"], a["y_max"], a["class_id"])
                for a in r["annotations"]]
        for b in anns:
            b.validate()
            if b.class_id is None or not (0 <= b.class_id < len(class_names)):
                raise DatasetError(f"record {r['id']}: class_id {b.class_id} out of range")
            size = max(size, int(math.ceil(b.x_max)), int(math.ceil(b.y_max)))
        images.append(ImageRecord(image_id=r["id"], path=r["path"], annotations=anns))
    return DatasetManifest(seed=0, image_size=size, class_names=list(class_names),
                           images=images, root=root)
