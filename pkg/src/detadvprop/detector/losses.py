"""Focal classification loss, Huber box loss and their weighted sum."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..config import ConfigError

LOG_EPS = math.log(1e-12)


@dataclass
class LossBundle:
    l_cls: torch.Tensor
    l_loc: torch.Tensor
    l_det: torch.Tensor

    def item(self):
        return {"l_cls": float(self.l_cls), "l_loc": float(self.l_loc), "l_det": float(self.l_det)}


def _reduce(per_anchor, mask, reduction):
    """Mean of ``per_anchor`` over ``mask``; per image (leading dim) for ``reduction='none'``."""
    per_anchor = per_anchor * mask
    if reduction == "none":
        dims = tuple(range(1, per_anchor.dim()))
        return per_anchor.sum(dim=dims) / mask.sum(dim=dims).clamp(min=1)
    if reduction == "mean":
        return per_anchor.sum() / mask.sum().clamp(min=1)
    raise ValueError(f"unknown reduction {reduction!r}")


def focal_loss(class_logits, class_target, alpha=0.25, gamma=1.5, reduction="mean"):
    """Sigmoid focal loss summed over classes, averaged over non-ignored anchors.

    Background anchors (target -1) count as negatives for every class;
    ignored anchors (target -2) are excluded.
    """
    num_classes = class_logits.shape[-1]
    valid = class_target >= -1
    onehot = F.one_hot(class_target.clamp(min=0), num_classes).to(class_logits.dtype)
    onehot = onehot * (class_target >= 0).unsqueeze(-1).to(class_logits.dtype)
    # log p_t, with p_t clamped at 1e-12
    log_pt = torch.where(onehot > 0, F.logsigmoid(class_logits), F.logsigmoid(-class_logits))
    log_pt = log_pt.clamp(min=LOG_EPS)
    pt = log_pt.exp()
    alpha_t = torch.where(onehot > 0, torch.full_like(pt, alpha), torch.full_like(pt, 1 - alpha))
    if gamma == 0:
        per_term = -alpha_t * log_pt
    else:
        per_term = -alpha_t * (1 - pt).pow(gamma) * log_pt
    return _reduce(per_term.sum(dim=-1), valid.to(class_logits.dtype), reduction)


def huber_loss(box_pred, box_target, box_mask, delta=0.1, reduction="mean"):
    """Huber loss averaged over positive anchors and the four coordinates; 0 without positives."""
    if delta <= 0:
        raise ConfigError("huber delta must be > 0")
    per_coord = F.huber_loss(box_pred, box_target, reduction="none", delta=delta)
    mask = box_mask.to(box_pred.dtype).unsqueeze(-1).expand_as(per_coord)
    return _reduce(per_coord, mask, reduction)


def bundle_from_predictions(class_logits, box_pred, targets, config, reduction="mean"):
    l_cls = focal_loss(class_logits, targets.class_target, config.focal_alpha, config.focal_gamma, reduction)
    l_loc = huber_loss(box_pred, targets.box_target, targets.box_mask, config.huber_delta, reduction)
    return LossBundle(l_cls, l_loc, l_cls + config.loss_weight * l_loc)


def detection_loss(batch, targets, branch, state, reduction="mean"):
    """Forward ``batch`` through batch-norm ``branch`` of ``state`` and score it."""
    class_logits, box_pred = state(batch, branch)
    return bundle_from_predictions(class_logits, box_pred, targets, state.config, reduction)
