"""Training objectives: standard detection losses, the two consistency
losses between original and flipped query branches, and the weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from .geometry import DELTA_SIGNS, FlipKind

PROB_FLOOR = 1e-8

# headline weights; KLD runs with a larger weight per the regularizer ablation
DEFAULT_LAMBDA_CLS = {"l2": 0.05, "jsd": 0.05, "kld": 0.1}
DEFAULT_LAMBDA_REG = 0.02


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ConsistencyConfig:
    lambda_cls: Optional[float] = None   # None -> regularizer-specific default
    lambda_reg: Optional[float] = None   # None -> 0.02
    cls_regularizer: str = "l2"          # l2 | jsd | kld
    flip_kind: FlipKind = FlipKind.DIAGONAL
    reduction: str = "sum"               # sum (as written) | mean

    def __post_init__(self):
        if self.cls_regularizer not in ("l2", "jsd", "kld"):
            raise LossError(f"unknown cls regularizer: {self.cls_regularizer}")
        if self.reduction not in ("sum", "mean"):
            raise LossError(f"unknown reduction: {self.reduction}")
        for name, v in (("lambda_cls", self.lambda_cls), ("lambda_reg", self.lambda_reg)):
            if v is not None and v < 0:
                raise LossError(f"{name} must be >= 0, got {v}")

    @property
    def effective_lambda_cls(self) -> float:
        if self.lambda_cls is not None:
            return self.lambda_cls
        return DEFAULT_LAMBDA_CLS[self.cls_regularizer]

    @property
    def effective_lambda_reg(self) -> float:
        return DEFAULT_LAMBDA_REG if self.lambda_reg is None else self.lambda_reg

    def to_dict(self) -> dict:
        return {
            "lambda_cls": self.lambda_cls, "lambda_reg": self.lambda_reg,
            "cls_regularizer": self.cls_regularizer,
            "flip_kind": FlipKind(self.flip_kind).value, "reduction": self.reduction,
        }

    @staticmethod
    def from_dict(d: dict) -> "ConsistencyConfig":
        d = dict(d)
        if "flip_kind" in d:
            d["flip_kind"] = FlipKind(d["flip_kind"])
        return ConsistencyConfig(**d)


def _reduce(per_row: torch.Tensor, reduction: str) -> torch.Tensor:
    if per_row.numel() == 0:
        return per_row.new_zeros(())
    return per_row.sum() if reduction == "sum" else per_row.mean()


def cls_consistency(scores: torch.Tensor, scores_t: torch.Tensor,
                    regularizer: str = "l2", reduction: str = "sum") -> torch.Tensor:
    """Distance between the two branches' per-proposal class distributions.

    l2 is the squared Euclidean distance per row; jsd/kld are computed
    row-wise with a 1e-8 probability floor inside the logs. KLD is directed
    KL(scores || scores_t).
    """
    scores = torch.as_tensor(scores, dtype=torch.float32) if not torch.is_tensor(scores) else scores
    scores_t = torch.as_tensor(scores_t, dtype=torch.float32) if not torch.is_tensor(scores_t) else scores_t
    if scores.shape != scores_t.shape or scores.dim() != 2:
        raise LossError(f"shape mismatch: {tuple(scores.shape)} vs {tuple(scores_t.shape)}")
    if regularizer == "l2":
        per_row = ((scores - scores_t) ** 2).sum(dim=1)
    elif regularizer == "kld":
        p = scores.clamp(min=PROB_FLOOR)
        q = scores_t.clamp(min=PROB_FLOOR)
        per_row = (scores * (p.log() - q.log())).sum(dim=1)
    elif regularizer == "jsd":
        m = (0.5 * (scores + scores_t)).clamp(min=PROB_FLOOR)
        p = scores.clamp(min=PROB_FLOOR)
        q = scores_t.clamp(min=PROB_FLOOR)
        per_row = 0.5 * (scores * (p.log() - m.log())).sum(dim=1) \
            + 0.5 * (scores_t * (q.log() - m.log())).sum(dim=1)
    else:
        raise LossError(f"unknown regularizer: {regularizer}")
    return _reduce(per_row, reduction)


def reg_consistency(deltas: torch.Tensor, deltas_t: torch.Tensor,
                    flip_kind: FlipKind, reduction: str = "sum") -> torch.Tensor:
    """Squared distance between original deltas and sign-corrected flipped
    deltas: dx/dy of the flipped branch are negated per the flip kind,
    dw/dh compared directly."""
    deltas = torch.as_tensor(deltas, dtype=torch.float32) if not torch.is_tensor(deltas) else deltas
    deltas_t = torch.as_tensor(deltas_t, dtype=torch.float32) if not torch.is_tensor(deltas_t) else deltas_t
    if deltas.shape != deltas_t.shape or deltas.shape[-1] != 4:
        raise LossError(f"shape mismatch: {tuple(deltas.shape)} vs {tuple(deltas_t.shape)}")
    sx, sy = DELTA_SIGNS[FlipKind(flip_kind)]
    signs = deltas.new_tensor([sx, sy, 1.0, 1.0])
    per_row = ((deltas - signs * deltas_t) ** 2).sum(dim=-1)
    return _reduce(per_row.reshape(-1), reduction)


def detection_losses(rpn_cls_logits: torch.Tensor, rpn_cls_targets: torch.Tensor,
                     rpn_reg_pred: torch.Tensor, rpn_reg_targets: torch.Tensor,
                     roi_cls_logits: torch.Tensor, roi_cls_targets: torch.Tensor,
                     roi_reg_pred: torch.Tensor, roi_reg_targets: torch.Tensor):
    """Standard two-stage losses: (L_rpn, L_cls, L_reg).

    RPN: binary cross-entropy on sampled anchors plus L1 on foreground
    anchor deltas. Head: cross-entropy plus L1 on foreground class-specific
    deltas. Regression terms are 0 when there is no foreground.
    """
    zero = torch.zeros((), dtype=torch.float32)
    if rpn_cls_logits.numel():
        l_rpn = F.binary_cross_entropy_with_logits(rpn_cls_logits, rpn_cls_targets.float())
    else:
        l_rpn = zero.clone()
    if rpn_reg_pred.numel():
        l_rpn = l_rpn + F.l1_loss(rpn_reg_pred, rpn_reg_targets)
    if roi_cls_logits.numel():
        l_cls = F.cross_entropy(roi_cls_logits, roi_cls_targets)
    else:
        l_cls = zero.clone()
    if roi_reg_pred.numel():
        l_reg = F.l1_loss(roi_reg_pred, roi_reg_targets)
    else:
        l_reg = zero.clone()
    return l_rpn, l_cls, l_reg


def total_loss(parts: Dict[str, torch.Tensor], config: ConsistencyConfig) -> torch.Tensor:
    """Weighted sum: rpn + cls + reg + l1*cls_consistency + l2*reg_consistency."""
    required = ("rpn", "cls", "reg", "cls_consistency", "reg_consistency")
    for name in required:
        if name not in parts:
            raise LossError(f"missing loss part: {name}")
        v = torch.as_tensor(parts[name])
        if torch.isnan(v).any() or torch.isinf(v).any():
            raise LossError(f"non-finite loss part: {name} = {v}")
    return (
        parts["rpn"] + parts["cls"] + parts["reg"]
        + config.effective_lambda_cls * parts["cls_consistency"]
        + config.effective_lambda_reg * parts["reg_consistency"]
    )
