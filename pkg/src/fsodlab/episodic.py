"""N-way K-shot episode sampling and 4-channel support input construction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import BoundingBox
from .synthdata import DatasetManifest, ImageRecord, InstanceRef, load_image

DEFAULT_SUPPORT_SIZE = 64


class EpisodeError(ValueError):
    pass


@dataclass
class EpisodePool:
    """Instance index over a subset of a dataset, the unit episodes draw from.

    ``allowed`` restricts which annotations are visible as training targets;
    a K-shot fine-tuning pool only exposes its K selected instances per class.
    """
    manifest: DatasetManifest
    records: Dict[int, ImageRecord]
    by_class: Dict[int, List[InstanceRef]]
    allowed: Optional[set] = None  # {(image_id, ann_index)}

    @staticmethod
    def from_records(manifest: DatasetManifest, records: Sequence[ImageRecord],
                     class_ids: Optional[Sequence[int]] = None) -> "EpisodePool":
        allowed = set(class_ids) if class_ids is not None else None
        by_class: Dict[int, List[InstanceRef]] = {}
        recs = {}
        for rec in records:
            recs[rec.image_id] = rec
            for j, b in enumerate(rec.annotations):
                if allowed is None or b.class_id in allowed:
                    by_class.setdefault(b.class_id, []).append(InstanceRef(rec.image_id, j))
        return EpisodePool(manifest=manifest, records=recs, by_class=by_class)

    @staticmethod
    def from_instances(manifest: DatasetManifest, instances: Sequence[InstanceRef]) -> "EpisodePool":
        all_records = {rec.image_id: rec for rec in manifest.images}
        by_class: Dict[int, List[InstanceRef]] = {}
        recs = {}
        for ref in instances:
            rec = all_records[ref.image_id]
            recs[rec.image_id] = rec
            cid = rec.annotations[ref.ann_index].class_id
            by_class.setdefault(cid, []).append(ref)
        allowed = {(ref.image_id, ref.ann_index) for ref in instances}
        return EpisodePool(manifest=manifest, records=recs, by_class=by_class, allowed=allowed)

    def classes_with_at_least(self, k: int) -> List[int]:
        return sorted(c for c, refs in self.by_class.items() if len(refs) >= k)

    def annotations_for(self, image_id: int) -> List[Tuple[int, BoundingBox]]:
        """(ann_index, box) pairs visible as targets for one image."""
        rec = self.records[image_id]
        return [
            (j, b) for j, b in enumerate(rec.annotations)
            if self.allowed is None or (image_id, j) in self.allowed
        ]

    def load(self, image_id: int) -> np.ndarray:
        return load_image(self.manifest, self.records[image_id])


@dataclass
class Episode:
    episode_index: int
    class_ids: List[int]
    support_items: List[Tuple[InstanceRef, int]]  # (instance, class_id), K per class
    query_ids: List[int]                           # image ids

    def support_instance_keys(self) -> set:
        return {(ref.image_id, ref.ann_index) for ref, _ in self.support_items}


@dataclass
class SupportInput:
    data: torch.Tensor  # (4, S, S): RGB + binary mask
    class_id: int


def sample_episode(pool: EpisodePool, n_way: int, k_shot: int,
                   rng: np.random.Generator, n_query: int = 4,
                   episode_index: int = 0, allow_overlap: bool = False) -> Episode:
    """Sample one N-way K-shot episode from the pool.

    Classes are drawn uniformly among those with >= k_shot instances, then
    k_shot instances per class without replacement. Query images come from
    the same pool; unless ``allow_overlap``, images holding a chosen support
    instance are excluded so support and query share no instance ids
    (fine-tuning pools are too small for that exclusion, hence the flag).
    """
    eligible = pool.classes_with_at_least(k_shot)
    if len(eligible) < n_way:
        raise EpisodeError(
            f"need {n_way} classes with >= {k_shot} instances, pool has {len(eligible)}"
        )
    picked = rng.choice(len(eligible), size=n_way, replace=False)
    class_ids = [eligible[i] for i in sorted(picked.tolist())]

    support: List[Tuple[InstanceRef, int]] = []
    for c in class_ids:
        refs = pool.by_class[c]
        idx = rng.choice(len(refs), size=k_shot, replace=False)
        support.extend((refs[i], c) for i in sorted(idx.tolist()))

    support_image_ids = {ref.image_id for ref, _ in support}
    candidates = [
        iid for iid, rec in sorted(pool.records.items())
        if any(b.class_id in class_ids for b in rec.annotations)
        and (allow_overlap or iid not in support_image_ids)
    ]
    if not candidates:
        if not allow_overlap:
            raise EpisodeError("no query images left after excluding support images")
        raise EpisodeError("pool has no query candidates for the sampled classes")
    q_idx = rng.integers(0, len(candidates), size=n_query)
    query_ids = [candidates[i] for i in q_idx.tolist()]

    return Episode(episode_index=episode_index, class_ids=class_ids,
                   support_items=support, query_ids=query_ids)


def build_support_input(image: np.ndarray, box: BoundingBox,
                        out_size: int = DEFAULT_SUPPORT_SIZE) -> SupportInput:
    """RGB image plus a binary box mask, resized to the support resolution.

    The mask is built at full resolution, then resized with nearest-neighbor
    so it stays exactly binary; RGB channels are resized bilinearly.
    """
    c, h, w = image.shape
    if c != 3:
        raise EpisodeError(f"expected CHW RGB image, got shape {image.shape}")
    box.validate()
    if box.x_min < 0 or box.y_min < 0 or box.x_max > w or box.y_max > h:
        raise EpisodeError(f"box {box.as_tuple()} outside {w}x{h} image")
    mask = np.zeros((h, w), dtype=np.float32)
    x0, y0 = int(np.floor(box.x_min)), int(np.floor(box.y_min))
    x1, y1 = int(np.ceil(box.x_max)), int(np.ceil(box.y_max))
    mask[y0:y1, x0:x1] = 1.0

    rgb = torch.from_numpy(np.ascontiguousarray(image))[None]
    rgb = F.interpolate(rgb, size=(out_size, out_size), mode="bilinear", align_corners=False)
    m = torch.from_numpy(mask)[None, None]
    m = F.interpolate(m, size=(out_size, out_size), mode="nearest")
    data = torch.cat([rgb[0], m[0]], dim=0)
    if box.class_id is None:
        raise EpisodeError("support box must carry a class_id")
    return SupportInput(data=data, class_id=box.class_id)
