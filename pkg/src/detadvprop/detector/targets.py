"""Ground-truth containers, box coding and IoU-based anchor labeling."""

from dataclasses import dataclass, field
from typing import List, Tuple

import torch

IGNORE = -2
BACKGROUND = -1


@dataclass
class Annotation:
    boxes: List[Tuple[float, float, float, float]] = field(default_factory=list)
    classes: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.boxes = [tuple(float(v) for v in box) for box in self.boxes]
        self.classes = [int(c) for c in self.classes]
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes must have equal length")
        for ymin, xmin, ymax, xmax in self.boxes:
            if not (ymin < ymax and xmin < xmax):
                raise ValueError(f"malformed box {(ymin, xmin, ymax, xmax)}")

    def __len__(self):
        return len(self.boxes)

    def box_tensor(self):
        return torch.tensor(self.boxes, dtype=torch.float32).reshape(-1, 4)

    def check_bounds(self, image_size, num_classes=None):
        height, width = image_size
        for ymin, xmin, ymax, xmax in self.boxes:
            if ymin < 0 or xmin < 0 or ymax > height or xmax > width:
                raise ValueError(f"box {(ymin, xmin, ymax, xmax)} outside image {image_size}")
        if num_classes is not None and any(c < 0 or c >= num_classes for c in self.classes):
            raise ValueError(f"class id outside [0, {num_classes})")


@dataclass
class AnchorTargets:
    """Per-anchor training targets.

    ``class_target`` holds a class id, ``BACKGROUND`` or ``IGNORE``;
    ``box_mask`` marks the anchors whose offsets are regressed. The mask is
    kept separately because adversarial target labels relabel background
    anchors without giving them boxes.
    """

    class_target: torch.Tensor
    box_target: torch.Tensor
    box_mask: torch.Tensor

    def to(self, device):
        return AnchorTargets(self.class_target.to(device), self.box_target.to(device), self.box_mask.to(device))

    def __getitem__(self, index):
        return AnchorTargets(self.class_target[index], self.box_target[index], self.box_mask[index])


def stack_targets(targets):
    return AnchorTargets(
        torch.stack([t.class_target for t in targets]),
        torch.stack([t.box_target for t in targets]),
        torch.stack([t.box_mask for t in targets]),
    )


def box_area(boxes):
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def box_iou(a, b):
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)``; zero-area pairs give 0."""
    top_left = torch.maximum(a[:, None, :2], b[None, :, :2])
    bottom_right = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (bottom_right - top_left).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_boxes(boxes, anchors):
    """Offsets ``(dcy / h_a, dcx / w_a, log(h / h_a), log(w / w_a))``."""
    ha = anchors[..., 2] - anchors[..., 0]
    wa = anchors[..., 3] - anchors[..., 1]
    cya = anchors[..., 0] + 0.5 * ha
    cxa = anchors[..., 1] + 0.5 * wa
    h = boxes[..., 2] - boxes[..., 0]
    w = boxes[..., 3] - boxes[..., 1]
    cy = boxes[..., 0] + 0.5 * h
    cx = boxes[..., 1] + 0.5 * w
    return torch.stack([(cy - cya) / ha, (cx - cxa) / wa, torch.log(h / ha), torch.log(w / wa)], dim=-1)


def decode_boxes(offsets, anchors, max_log_ratio=4.0):
    ha = anchors[..., 2] - anchors[..., 0]
    wa = anchors[..., 3] - anchors[..., 1]
    cya = anchors[..., 0] + 0.5 * ha
    cxa = anchors[..., 1] + 0.5 * wa
    cy = offsets[..., 0] * ha + cya
    cx = offsets[..., 1] * wa + cxa
    h = torch.exp(offsets[..., 2].clamp(max=max_log_ratio)) * ha
    w = torch.exp(offsets[..., 3].clamp(max=max_log_ratio)) * wa
    return torch.stack([cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w], dim=-1)


def assign_targets(anchors, ann, pos_thr=0.5, neg_thr=0.4):
    """Label every anchor as positive, background or ignored.

    Anchors with best IoU >= ``pos_thr`` take the class and offsets of that
    ground-truth box, anchors below ``neg_thr`` are background and the rest
    are ignored. Each ground-truth box additionally claims its highest-IoU
    anchor so that no object is left without a positive.
    """
    if not 0 <= neg_thr <= pos_thr <= 1:
        raise ValueError("need 0 <= neg_thr <= pos_thr <= 1")
    anchor_boxes = anchors.boxes if hasattr(anchors, "boxes") else anchors
    num_anchors = len(anchor_boxes)
    if num_anchors == 0:
        raise ValueError("empty anchor set")
    class_target = torch.full((num_anchors,), BACKGROUND, dtype=torch.long)
    box_target = torch.zeros((num_anchors, 4), dtype=torch.float32)
    if len(ann) == 0:
        return AnchorTargets(class_target, box_target, torch.zeros(num_anchors, dtype=torch.bool))

    gt_boxes = ann.box_tensor()
    gt_classes = torch.tensor(ann.classes, dtype=torch.long)
    iou = box_iou(anchor_boxes, gt_boxes)  # (A, G)
    best_iou, best_gt = iou.max(dim=1)

    class_target[(best_iou >= neg_thr) & (best_iou < pos_thr)] = IGNORE
    positive = best_iou >= pos_thr

    # force-match: the best anchor of each GT box belongs to that box
    forced = iou.argmax(dim=0)
    for gt_index, anchor_index in enumerate(forced.tolist()):
        best_gt[anchor_index] = gt_index
        positive[anchor_index] = True

    class_target[positive] = gt_classes[best_gt[positive]]
    box_target[positive] = encode_boxes(gt_boxes[best_gt[positive]], anchor_boxes[positive])
    return AnchorTargets(class_target, box_target, positive.clone())
