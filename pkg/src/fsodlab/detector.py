"""Two-branch few-shot detector.

Query branch: shared backbone + FPN + RPN + RoI Align. Support branch:
the same backbone on 4-channel (RGB + box mask) crops, global average
pooling to a per-class prototype vector. Aggregation multiplies each RoI
feature channel by the matching prototype channel (a 1x1 depth-wise
convolution), after which a small fully-connected head emits per-class
probabilities and class-specific box deltas.

The backbone is a small GroupNorm convnet (no batch statistics, so forward
passes never mutate model state and runs are bit-reproducible).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align as tv_roi_align

from . import geometry
from .episodic import SupportInput


class DetectorError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 64)
    fpn_channels: int = 64
    head_hidden: int = 128
    anchor_sizes: Tuple[int, int, int, int] = (16, 32, 64, 128)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    roi_size: int = 7
    support_size: int = 64
    canonical_box_size: int = 32  # box side mapped to pyramid level 1

    @property
    def strides(self) -> Tuple[int, int, int, int]:
        return (4, 8, 16, 32)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("stage_channels", "anchor_sizes", "anchor_ratios"):
            if k in d:
                d[k] = tuple(d[k])
        return ModelConfig(**d)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _gn(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else (4 if channels % 4 == 0 else 1)
    return nn.GroupNorm(groups, channels)


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1, bias=False), _gn(cout), nn.ReLU(inplace=True)
    )


class Backbone(nn.Module):
    """Four stages with output strides 4, 8, 16, 32. Input is 4-channel."""

    def __init__(self, stage_channels: Sequence[int]):
        super().__init__()
        c1, c2, c3, c4 = stage_channels
        self.stage1 = nn.Sequential(_conv_block(4, c1, 2), _conv_block(c1, c1, 2))
        self.stage2 = nn.Sequential(_conv_block(c1, c2, 2), _conv_block(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv_block(c2, c3, 2), _conv_block(c3, c3, 1))
        self.stage4 = nn.Sequential(_conv_block(c3, c4, 2), _conv_block(c4, c4, 1))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return [f1, f2, f3, f4]


class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, feats: List[torch.Tensor]) -> List[torch.Tensor]:
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest"
            )
        return [out(l) for out, l in zip(self.output, laterals)]


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)

    def forward(self, pyramid: List[torch.Tensor]):
        obj, reg = [], []
        for f in pyramid:
            h = F.relu(self.conv(f))
            obj.append(self.objectness(h))
            reg.append(self.deltas(h))
        return obj, reg


class RoIHead(nn.Module):
    """Two FC layers, then classification (classes + background) and
    class-specific regression outputs."""

    def __init__(self, in_channels: int, roi_size: int, hidden: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = nn.Linear(in_channels * roi_size * roi_size, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, num_classes * 4)

    def forward(self, rois: torch.Tensor):
        x = rois.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        logits = self.cls(x)
        deltas = self.reg(x).view(-1, self.num_classes, 4)
        return logits, deltas


@dataclass
class HeadOutput:
    cls_logits: torch.Tensor   # (J, C+1)
    cls_scores: torch.Tensor   # (J, C+1), softmax rows
    reg_deltas: torch.Tensor   # (J, C, 4)


# ---------------------------------------------------------------------------
# box coding

DELTA_CLAMP = 4.0


def encode_boxes(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh) mapping anchors onto targets; both (N, 4) corner boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tx - ax) / aw, (ty - ay) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1
    )


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(-DELTA_CLAMP, DELTA_CLAMP)
    dh = deltas[:, 3].clamp(-DELTA_CLAMP, DELTA_CLAMP)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, width: float, height: float) -> torch.Tensor:
    x1 = boxes[:, 0].clamp(0.0, width)
    y1 = boxes[:, 1].clamp(0.0, height)
    x2 = boxes[:, 2].clamp(0.0, width)
    y2 = boxes[:, 3].clamp(0.0, height)
    return torch.stack([x1, y1, x2, y2], dim=1)


def flip_boxes_tensor(boxes: torch.Tensor, kind: geometry.FlipKind,
                      width: float, height: float) -> torch.Tensor:
    """Vectorized counterpart of geometry.flip_box, order-preserving."""
    kind = geometry.FlipKind(kind)
    if kind is geometry.FlipKind.NONE:
        return boxes
    x1, y1, x2, y2 = boxes.unbind(dim=1)
    if kind in (geometry.FlipKind.HORIZONTAL, geometry.FlipKind.DIAGONAL):
        x1, x2 = width - x2, width - x1
    if kind in (geometry.FlipKind.VERTICAL, geometry.FlipKind.DIAGONAL):
        y1, y2 = height - y2, height - y1
    return torch.stack([x1, y1, x2, y2], dim=1)


def flip_images_tensor(images: torch.Tensor, kind: geometry.FlipKind) -> torch.Tensor:
    kind = geometry.FlipKind(kind)
    if kind is geometry.FlipKind.NONE:
        return images
    dims = {
        geometry.FlipKind.HORIZONTAL: [3],
        geometry.FlipKind.VERTICAL: [2],
        geometry.FlipKind.DIAGONAL: [2, 3],
    }[kind]
    return torch.flip(images, dims=dims)


# ---------------------------------------------------------------------------
# anchors


def generate_anchors(feature_sizes: Sequence[Tuple[int, int]], strides: Sequence[int],
                     sizes: Sequence[int], ratios: Sequence[float]) -> List[torch.Tensor]:
    """Per-level (H*W*A, 4) anchor boxes in image coordinates."""
    out = []
    for (fh, fw), stride, size in zip(feature_sizes, strides, sizes):
        base = []
        for r in ratios:
            w = size / math.sqrt(r)
            h = size * math.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
        base_t = torch.tensor(base, dtype=torch.float32)  # (A, 4)
        ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * stride
        xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        centers = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
        anchors = (centers + base_t.reshape(1, -1, 4)).reshape(-1, 4)
        out.append(anchors)
    return out


# ---------------------------------------------------------------------------
# model


class FewShotDetector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.stage_channels)
        self.fpn = FPN(config.stage_channels, config.fpn_channels)
        self.rpn = RPNHead(config.fpn_channels, len(config.anchor_ratios))
        self.support_proj = nn.Linear(config.stage_channels[-1], config.fpn_channels)
        self.roi_head = RoIHead(
            config.fpn_channels, config.roi_size, config.head_hidden, config.num_classes
        )
        self._anchor_cache: Dict[tuple, List[torch.Tensor]] = {}

    # -- query branch -------------------------------------------------------

    def extract_pyramid(self, images: torch.Tensor) -> List[torch.Tensor]:
        """RGB (B, 3, H, W) -> FPN pyramid. H, W must be divisible by 32;
        otherwise the batch is zero-padded up (logged once per size)."""
        b, c, h, w = images.shape
        if c == 3:
            images = torch.cat([images, images.new_zeros(b, 1, h, w)], dim=1)
        ph = (32 - h % 32) % 32
        pw = (32 - w % 32) % 32
        if ph or pw:
            import logging
            logging.getLogger(__name__).info("padding %dx%d input by (%d, %d)", h, w, ph, pw)
            images = F.pad(images, (0, pw, 0, ph))
        return self.fpn(self.backbone(images))

    def anchors_for(self, pyramid: List[torch.Tensor]) -> List[torch.Tensor]:
        key = tuple(f.shape[-2:] for f in pyramid)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                key, self.config.strides, self.config.anchor_sizes, self.config.anchor_ratios
            )
        return self._anchor_cache[key]

    def rpn_forward(self, pyramid: List[torch.Tensor]):
        return self.rpn(pyramid)

    def propose(self, pyramid: List[torch.Tensor], image_size: Tuple[int, int],
                nms_iou: float, max_proposals: int = 128,
                pre_nms_topk: int = 128, min_size: float = 2.0,
                rpn_out=None) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """Decode RPN outputs into per-image (boxes, scores), NMS-filtered.

        Proposals are detached: the RPN trains through its own losses, not
        through the RoI head (standard two-stage practice).
        """
        h, w = image_size
        obj_levels, reg_levels = rpn_out if rpn_out is not None else self.rpn(pyramid)
        anchors = self.anchors_for(pyramid)
        batch = obj_levels[0].shape[0]
        results = []
        for b in range(batch):
            boxes_all, scores_all = [], []
            for lvl, (obj, reg, anc) in enumerate(zip(obj_levels, reg_levels, anchors)):
                scores = obj[b].permute(1, 2, 0).reshape(-1).detach()
                deltas = reg[b].permute(1, 2, 0).reshape(-1, 4).detach()
                k = min(pre_nms_topk, scores.numel())
                top = torch.topk(scores, k).indices
                boxes = decode_boxes(anc[top], deltas[top])
                boxes = clip_boxes(boxes, float(w), float(h))
                keep = (boxes[:, 2] - boxes[:, 0] >= min_size) & (
                    boxes[:, 3] - boxes[:, 1] >= min_size
                )
                boxes_all.append(boxes[keep])
                scores_all.append(scores[top][keep])
            boxes = torch.cat(boxes_all)
            scores = torch.cat(scores_all)
            if boxes.shape[0] == 0:
                results.append((boxes, scores))
                continue
            keep_idx = geometry.nms(boxes.numpy(), scores.numpy(), nms_iou,
                                    max_keep=max_proposals)
            idx = torch.as_tensor(keep_idx, dtype=torch.long)
            results.append((boxes[idx], scores[idx]))
        return results

    def roi_features(self, pyramid: List[torch.Tensor],
                     proposals: Sequence[torch.Tensor]) -> torch.Tensor:
        """RoI Align each proposal from its pyramid level; output (N, C, 7, 7).

        Level = clamp(1 + floor(log2(sqrt(area) / canonical)), 0, 3), so
        boxes up to ~16 px land on the finest level.
        """
        boxes = torch.cat(list(proposals), dim=0)
        if boxes.numel() == 0:
            c = pyramid[0].shape[1]
            return pyramid[0].new_zeros((0, c, self.config.roi_size, self.config.roi_size))
        batch_idx = torch.cat(
            [torch.full((p.shape[0],), i, dtype=torch.float32) for i, p in enumerate(proposals)]
        )
        area = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6) * (
            boxes[:, 3] - boxes[:, 1]
        ).clamp(min=1e-6)
        levels = torch.clamp(
            1 + torch.floor(torch.log2(torch.sqrt(area) / self.config.canonical_box_size)),
            0, len(pyramid) - 1,
        ).to(torch.long)
        out = pyramid[0].new_zeros(
            (boxes.shape[0], pyramid[0].shape[1], self.config.roi_size, self.config.roi_size)
        )
        rois = torch.cat([batch_idx[:, None], boxes], dim=1)
        for lvl, (feat, stride) in enumerate(zip(pyramid, self.config.strides)):
            sel = torch.nonzero(levels == lvl, as_tuple=True)[0]
            if sel.numel() == 0:
                continue
            out[sel] = tv_roi_align(
                feat, rois[sel], output_size=self.config.roi_size,
                spatial_scale=1.0 / stride, sampling_ratio=1, aligned=True,
            )
        return out

    # -- support branch -----------------------------------------------------

    def support_vectors(self, batch: torch.Tensor) -> torch.Tensor:
        """(B, 4, S, S) support inputs -> (B, C) prototype vectors via the
        shared backbone's final stage, GAP, and a 1x1 projection."""
        feats = self.backbone(batch)[-1]
        pooled = feats.mean(dim=(2, 3))
        return self.support_proj(pooled)

    def encode_support(self, inputs: Sequence[SupportInput]) -> Dict[int, torch.Tensor]:
        """Average the K shots of each class into one prototype vector."""
        if not inputs:
            raise DetectorError("encode_support needs at least one support input")
        by_class: Dict[int, List[torch.Tensor]] = {}
        for s in inputs:
            by_class.setdefault(s.class_id, []).append(s.data)
        out = {}
        for cid in sorted(by_class):
            batch = torch.stack(by_class[cid])
            out[cid] = self.support_vectors(batch).mean(dim=0)
        return out

    # -- aggregation and head -----------------------------------------------

    @staticmethod
    def aggregate(roi: torch.Tensor, support: torch.Tensor) -> torch.Tensor:
        """Channel-wise product: out[., c, h, w] = roi[., c, h, w] * support[c]."""
        if roi.shape[1] != support.shape[0]:
            raise DetectorError(
                f"channel mismatch: roi has {roi.shape[1]}, support has {support.shape[0]}"
            )
        return roi * support.view(1, -1, 1, 1)

    def head(self, agg: torch.Tensor) -> HeadOutput:
        logits, deltas = self.roi_head(agg)
        return HeadOutput(
            cls_logits=logits, cls_scores=F.softmax(logits, dim=1), reg_deltas=deltas
        )


def transform_proposals(proposals: torch.Tensor, t: geometry.FlipTransform) -> torch.Tensor:
    """Flip each proposal; index j refers to the same region in both branches."""
    return flip_boxes_tensor(proposals, t.kind, t.image_width, t.image_height)


# ---------------------------------------------------------------------------
# target assignment (training machinery)


@dataclass
class AnchorTargets:
    sampled_idx: torch.Tensor   # (S,) anchor indices used in the loss
    labels: torch.Tensor        # (S,) 1 fg / 0 bg
    reg_targets: torch.Tensor   # (F, 4) for the fg subset
    fg_mask: torch.Tensor       # (S,) bool


def match_anchors(anchors: torch.Tensor, gt: torch.Tensor, rng: np.random.Generator,
                  fg_iou: float = 0.6, bg_iou: float = 0.3,
                  num_samples: int = 64, fg_fraction: float = 0.5) -> AnchorTargets:
    if gt.numel() == 0:
        bg_all = torch.from_numpy(
            rng.choice(anchors.shape[0], size=min(num_samples, anchors.shape[0]), replace=False)
        )
        lab = torch.zeros(len(bg_all), dtype=torch.long)
        return AnchorTargets(sampled_idx=bg_all, labels=lab,
                             reg_targets=anchors.new_zeros((0, 4)), fg_mask=lab == 1)
    iou = torch.from_numpy(geometry.pairwise_iou(anchors.numpy(), gt.numpy()))
    best_gt = iou.argmax(dim=1)
    best_iou = iou.gather(1, best_gt[:, None]).squeeze(1)
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    labels[best_iou < bg_iou] = 0
    labels[best_iou >= fg_iou] = 1
    # every gt claims its best anchor
    labels[iou.argmax(dim=0)] = 1
    fg_idx = torch.nonzero(labels == 1, as_tuple=True)[0]
    bg_idx = torch.nonzero(labels == 0, as_tuple=True)[0]
    n_fg = min(len(fg_idx), int(num_samples * fg_fraction))
    n_bg = min(len(bg_idx), num_samples - n_fg)
    fg_sel = fg_idx[torch.from_numpy(rng.choice(len(fg_idx), size=n_fg, replace=False))] \
        if n_fg else fg_idx[:0]
    bg_sel = bg_idx[torch.from_numpy(rng.choice(len(bg_idx), size=n_bg, replace=False))] \
        if n_bg else bg_idx[:0]
    sampled = torch.cat([fg_sel, bg_sel])
    lab = torch.cat([torch.ones(n_fg, dtype=torch.long), torch.zeros(n_bg, dtype=torch.long)])
    reg_targets = encode_boxes(anchors[fg_sel], gt[best_gt[fg_sel]]) if n_fg else \
        anchors.new_zeros((0, 4))
    return AnchorTargets(sampled_idx=sampled, labels=lab, reg_targets=reg_targets,
                         fg_mask=lab == 1)


@dataclass
class RoITargets:
    proposals: torch.Tensor     # (S, 4) sampled proposals (gt boxes appended)
    labels: torch.Tensor        # (S,) class id, background = num_classes
    reg_targets: torch.Tensor   # (F, 4) for fg subset
    fg_mask: torch.Tensor       # (S,) bool


def match_proposals(proposals: torch.Tensor, gt: torch.Tensor, gt_labels: torch.Tensor,
                    num_classes: int, rng: np.random.Generator,
                    fg_iou: float = 0.5, num_samples: int = 32,
                    fg_fraction: float = 0.25) -> RoITargets:
    """Sample fg/bg RoIs for the head. GT boxes are appended to the proposal
    pool so foreground exists from iteration one."""
    pool = torch.cat([proposals, gt], dim=0) if gt.numel() else proposals
    if pool.shape[0] == 0:
        return RoITargets(
            proposals=pool, labels=torch.zeros(0, dtype=torch.long),
            reg_targets=pool.new_zeros((0, 4)), fg_mask=torch.zeros(0, dtype=torch.bool),
        )
    if gt.numel():
        iou = torch.from_numpy(geometry.pairwise_iou(pool.numpy(), gt.numpy()))
        best_gt = iou.argmax(dim=1)
        best_iou = iou.gather(1, best_gt[:, None]).squeeze(1)
    else:
        best_gt = torch.zeros(pool.shape[0], dtype=torch.long)
        best_iou = torch.zeros(pool.shape[0])
    fg_idx = torch.nonzero(best_iou >= fg_iou, as_tuple=True)[0]
    bg_idx = torch.nonzero(best_iou < fg_iou, as_tuple=True)[0]
    n_fg = min(len(fg_idx), max(1, int(num_samples * fg_fraction))) if len(fg_idx) else 0
    n_bg = min(len(bg_idx), num_samples - n_fg)
    fg_sel = fg_idx[torch.from_numpy(rng.choice(len(fg_idx), size=n_fg, replace=False))] \
        if n_fg else fg_idx[:0]
    bg_sel = bg_idx[torch.from_numpy(rng.choice(len(bg_idx), size=n_bg, replace=False))] \
        if n_bg else bg_idx[:0]
    sel = torch.cat([fg_sel, bg_sel])
    labels = torch.cat([
        gt_labels[best_gt[fg_sel]] if n_fg else torch.zeros(0, dtype=torch.long),
        torch.full((n_bg,), num_classes, dtype=torch.long),
    ])
    reg_targets = encode_boxes(pool[fg_sel], gt[best_gt[fg_sel]]) if n_fg else \
        pool.new_zeros((0, 4))
    return RoITargets(
        proposals=pool[sel], labels=labels, reg_targets=reg_targets,
        fg_mask=torch.arange(len(sel)) < n_fg,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: FewShotDetector, iteration: int, phase: str) -> None:
    cfg = model.config.to_dict()
    torch.save(
        {"model_config": cfg, "state_dict": model.state_dict(),
         "iteration": iteration, "phase": phase},
        path,
    )
    h = hashlib.sha256()
    sd = model.state_dict()
    for name in sorted(sd):
        h.update(name.encode())
        h.update(sd[name].detach().cpu().numpy().tobytes())
    sidecar = {
        "config_hash": config_hash(cfg), "iteration": iteration, "phase": phase,
        "param_hash": h.hexdigest(),
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str) -> Tuple[FewShotDetector, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = FewShotDetector(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, {"iteration": blob["iteration"], "phase": blob["phase"],
                   "config_hash": config_hash(blob["model_config"])}
