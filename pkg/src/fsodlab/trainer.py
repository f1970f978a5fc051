"""Two-phase episodic training loop with per-iteration consistency.

One iteration: sample an episode, randomly flip-augment the query batch,
run the query branch, sample one random support prototype, aggregate, run
the head, add the consistency terms from the flipped branch, step SGD.
Everything draws from a single numpy Generator so a fixed seed fixes the
whole trajectory.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import traceback
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .detector import (
    FewShotDetector, ModelConfig, flip_boxes_tensor, flip_images_tensor,
    match_anchors, match_proposals, save_checkpoint,
)
from .episodic import EpisodePool, build_support_input, sample_episode
from .geometry import FlipKind

METHODS = ("tinet", "strong-baseline")
PHASES = ("base", "finetune")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    iterations: int
    seed: int = 0
    method: str = "tinet"
    lr_initial: float = 0.01
    lr_decay_at_fraction: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    consistency: L.ConsistencyConfig = field(default_factory=L.ConsistencyConfig)
    multiscale_sizes: Tuple[int, ...] = (96, 112, 128, 144)
    n_way: Optional[int] = None          # None -> every eligible class
    k_shot: int = 5
    random_flip_aug: bool = True
    randomize_consistency_flip: bool = False
    freeze_backbone: bool = False        # optional fine-tune regime
    support_size: int = 64
    rpn_train_nms: float = 0.7
    max_proposals: int = 128
    roi_samples: int = 32
    rpn_samples: int = 64

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrainingError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.method not in METHODS:
            raise TrainingError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.iterations < 1 or self.lr_initial <= 0:
            raise TrainingError("iterations must be >= 1 and lr_initial > 0")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "consistency"}
        d["multiscale_sizes"] = list(self.multiscale_sizes)
        d["consistency"] = self.consistency.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "consistency" in d and isinstance(d["consistency"], dict):
            d["consistency"] = L.ConsistencyConfig.from_dict(d["consistency"])
        if "multiscale_sizes" in d:
            d["multiscale_sizes"] = tuple(d["multiscale_sizes"])
        return TrainConfig(**d)


def build_model(config: ModelConfig, seed: int) -> FewShotDetector:
    torch.manual_seed(seed)
    return FewShotDetector(config)


def _resize_batch(images: List[np.ndarray], size: int) -> torch.Tensor:
    ts = []
    for img in images:
        t = torch.from_numpy(img)[None]
        if t.shape[-1] != size or t.shape[-2] != size:
            t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
        ts.append(t[0])
    return torch.stack(ts)


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _flatten_rpn_logits(obj_levels, reg_levels, b: int):
    obj = torch.cat([o[b].permute(1, 2, 0).reshape(-1) for o in obj_levels])
    reg = torch.cat([r[b].permute(1, 2, 0).reshape(-1, 4) for r in reg_levels])
    return obj, reg


@dataclass
class TrainResult:
    metrics: List[dict]
    final_param_hash: str
    param_hashes: List[str] = field(default_factory=list)


def train_phase(model: FewShotDetector, pool: EpisodePool, config: TrainConfig,
                out_dir: Optional[str] = None,
                base_checkpoint_meta: Optional[dict] = None,
                track_param_hashes: bool = False) -> TrainResult:
    """Run one training phase; returns the per-iteration metrics log.

    Fine-tuning refuses to start unless ``base_checkpoint_meta`` proves the
    model came from a completed base phase. Consistency losses apply in both
    phases. A checkpoint and CSV metrics log are written under ``out_dir``.
    """
    if config.phase == "finetune":
        if base_checkpoint_meta is None or base_checkpoint_meta.get("phase") != "base":
            raise TrainingError(
                "fine-tuning requires a base-phase checkpoint (got "
                f"{base_checkpoint_meta!r})"
            )
    tinet = config.method == "tinet"
    cons = config.consistency
    if config.method == "strong-baseline":
        cons = replace(cons, lambda_cls=0.0, lambda_reg=0.0)

    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(PHASES.index(config.phase),))
    )
    torch.manual_seed(config.seed)
    model.train()
    num_classes = model.config.num_classes
    for p in model.backbone.parameters():
        p.requires_grad_(not config.freeze_backbone)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=config.lr_initial,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    drop_at = math.ceil(config.lr_decay_at_fraction * config.iterations)
    lr = config.lr_initial

    eligible = pool.classes_with_at_least(config.k_shot)
    n_way = config.n_way if config.n_way is not None else len(eligible)
    allow_overlap = config.phase == "finetune"
    image_size = pool.manifest.image_size
    flip_kinds = [FlipKind.NONE, FlipKind.HORIZONTAL, FlipKind.VERTICAL, FlipKind.DIAGONAL]
    nontrivial_kinds = flip_kinds[1:]

    metrics: List[dict] = []
    hashes: List[str] = []
    for it in range(1, config.iterations + 1):
        if it == drop_at:
            lr = config.lr_initial * 0.1
            for g in opt.param_groups:
                g["lr"] = lr
        episode = sample_episode(pool, n_way, config.k_shot, rng,
                                 n_query=config.batch_size,
                                 episode_index=it - 1, allow_overlap=allow_overlap)
        size = int(config.multiscale_sizes[int(rng.integers(len(config.multiscale_sizes)))])
        scale = size / image_size

        imgs, gts, gt_labels = [], [], []
        for iid in episode.query_ids:
            img = pool.load(iid)
            anns = [(j, b) for j, b in pool.annotations_for(iid)
                    if b.class_id in episode.class_ids]
            boxes = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for _, b in anns],
                             dtype=np.float32).reshape(-1, 4) * scale
            labels = np.array([b.class_id for _, b in anns], dtype=np.int64)
            if config.random_flip_aug:
                kind = flip_kinds[int(rng.integers(len(flip_kinds)))]
                if kind is not FlipKind.NONE:
                    timg = torch.from_numpy(img)[None]
                    timg = flip_images_tensor(timg, kind)
                    img = timg[0].numpy()
                    tb = flip_boxes_tensor(torch.from_numpy(boxes), kind, size, size)
                    boxes = tb.numpy()
            imgs.append(img)
            gts.append(torch.from_numpy(np.ascontiguousarray(boxes)))
            gt_labels.append(torch.from_numpy(labels))
        images = _resize_batch(imgs, size)

        # support prototype: one randomly sampled shot (training convention)
        ref, sup_cid = episode.support_items[int(rng.integers(len(episode.support_items)))]
        sup_img = pool.load(ref.image_id)
        sup_box = pool.records[ref.image_id].annotations[ref.ann_index]
        sup_in = build_support_input(sup_img, sup_box, out_size=config.support_size)
        sup_vec = model.support_vectors(sup_in.data[None])[0]

        # query forward
        pyramid = model.extract_pyramid(images)
        rpn_out = model.rpn_forward(pyramid)
        proposals = model.propose(pyramid, (size, size), nms_iou=config.rpn_train_nms,
                                  max_proposals=config.max_proposals, rpn_out=rpn_out)
        anchors = torch.cat(model.anchors_for(pyramid))

        rpn_logit_list, rpn_tgt_list, rpn_reg_pred_list, rpn_reg_tgt_list = [], [], [], []
        sampled_props, roi_label_list, roi_reg_tgt_list, fg_mask_list = [], [], [], []
        for b in range(len(imgs)):
            at = match_anchors(anchors, gts[b], rng, num_samples=config.rpn_samples)
            obj_flat, reg_flat = _flatten_rpn_logits(*rpn_out, b)
            rpn_logit_list.append(obj_flat[at.sampled_idx])
            rpn_tgt_list.append(at.labels)
            rpn_reg_pred_list.append(reg_flat[at.sampled_idx[at.fg_mask]])
            rpn_reg_tgt_list.append(at.reg_targets)

            rt = match_proposals(proposals[b][0], gts[b], gt_labels[b],
                                 num_classes, rng, num_samples=config.roi_samples)
            sampled_props.append(rt.proposals)
            roi_label_list.append(rt.labels)
            roi_reg_tgt_list.append(rt.reg_targets)
            fg_mask_list.append(rt.fg_mask)

        roi_feats = model.roi_features(pyramid, sampled_props)
        agg = model.aggregate(roi_feats, sup_vec)
        head_out = model.head(agg)

        roi_labels = torch.cat(roi_label_list)
        fg_mask = torch.cat(fg_mask_list)
        fg_classes = roi_labels[fg_mask]
        fg_rows = torch.nonzero(fg_mask, as_tuple=True)[0]
        roi_reg_pred = head_out.reg_deltas[fg_rows, fg_classes]

        l_rpn, l_cls, l_reg = L.detection_losses(
            torch.cat(rpn_logit_list), torch.cat(rpn_tgt_list),
            torch.cat(rpn_reg_pred_list), torch.cat(rpn_reg_tgt_list),
            head_out.cls_logits, roi_labels, roi_reg_pred, torch.cat(roi_reg_tgt_list),
        )

        if tinet:
            if config.randomize_consistency_flip:
                cons_kind = nontrivial_kinds[int(rng.integers(len(nontrivial_kinds)))]
            else:
                cons_kind = FlipKind(cons.flip_kind)
            images_t = flip_images_tensor(images, cons_kind)
            props_t = [flip_boxes_tensor(p, cons_kind, size, size) for p in sampled_props]
            pyramid_t = model.extract_pyramid(images_t)
            roi_t = model.roi_features(pyramid_t, props_t)
            head_t = model.head(model.aggregate(roi_t, sup_vec))
            l_cls_c = L.cls_consistency(head_out.cls_scores, head_t.cls_scores,
                                        regularizer=cons.cls_regularizer,
                                        reduction=cons.reduction)
            l_reg_c = L.reg_consistency(roi_reg_pred,
                                        head_t.reg_deltas[fg_rows, fg_classes],
                                        cons_kind, reduction=cons.reduction)
        else:
            l_cls_c = torch.zeros(())
            l_reg_c = torch.zeros(())

        parts = {"rpn": l_rpn, "cls": l_cls, "reg": l_reg,
                 "cls_consistency": l_cls_c, "reg_consistency": l_reg_c}
        try:
            total = L.total_loss(parts, cons)
        except L.LossError as e:
            raise TrainingError(
                f"aborting at iteration {it}: {e}; episode classes={episode.class_ids} "
                f"query_ids={episode.query_ids} size={size}"
            ) from e

        opt.zero_grad()
        total.backward()
        opt.step()

        metrics.append({
            "iteration": it, "loss_total": float(total.detach()),
            "loss_rpn": float(l_rpn.detach()), "loss_cls": float(l_cls.detach()),
            "loss_reg": float(l_reg.detach()),
            "loss_cls_consistency": float(l_cls_c.detach()),
            "loss_reg_consistency": float(l_reg_c.detach()),
            "lr": lr,
        })
        if track_param_hashes:
            hashes.append(param_hash(model))

    final_hash = param_hash(model)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics_csv(os.path.join(out_dir, f"metrics_{config.phase}.csv"), metrics)
        save_checkpoint(os.path.join(out_dir, f"checkpoint_{config.phase}.pt"),
                        model, config.iterations, config.phase)
    return TrainResult(metrics=metrics, final_param_hash=final_hash, param_hashes=hashes)


def write_metrics_csv(path: str, metrics: List[dict]) -> None:
    if not metrics:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(metrics[0].keys()))
        writer.writeheader()
        writer.writerows(metrics)


# ---------------------------------------------------------------------------
# experiment grids


@dataclass
class ExperimentCell:
    name: str
    payload: dict


@dataclass
class ExperimentResult:
    rows: List[dict]

    def render(self) -> str:
        if not self.rows:
            return "(no cells)\n"
        cols = list(self.rows[0].keys())
        for r in self.rows[1:]:
            for k in r:
                if k not in cols:
                    cols.append(k)
        widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in self.rows)) for c in cols}
        lines = [" | ".join(c.ljust(widths[c]) for c in cols)]
        lines.append("-+-".join("-" * widths[c] for c in cols))
        for r in self.rows:
            lines.append(" | ".join(_fmt(r.get(c)).ljust(widths[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def run_experiment(cells: Sequence[ExperimentCell],
                   runner: Callable[[ExperimentCell], dict]) -> ExperimentResult:
    """Run each grid cell; a failing cell is recorded and the rest continue."""
    rows = []
    for cell in cells:
        row = {"cell": cell.name}
        try:
            row.update(runner(cell))
            row["status"] = "ok"
        except Exception as e:  # noqa: BLE001 - cell isolation is the contract
            row["status"] = "error"
            row["error"] = f"{type(e).__name__}: {e}"
            traceback.print_exc()
        rows.append(row)
    return ExperimentResult(rows=rows)
