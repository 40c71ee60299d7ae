"""Turn raw head outputs into scored, non-overlapping detections."""

from dataclasses import dataclass
from typing import Tuple

import torch
from torchvision.ops import batched_nms

from .targets import decode_boxes


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


def decode_and_nms(class_logits, box_pred, anchors, score_thr=0.05, nms_iou=0.5, max_dets=100,
                   pre_nms_top_k=1000):
    """Per image: sigmoid scores, decoded and clipped boxes, class-wise greedy NMS.

    Returns one list of :class:`Detection` per image, sorted by descending
    score and truncated to ``max_dets``.
    """
    if not (0 <= score_thr <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    anchor_boxes = anchors.boxes
    height, width = anchors.image_size
    limits = torch.tensor([height, width, height, width], dtype=torch.float32)
    results = []
    with torch.no_grad():
        scores_all = torch.sigmoid(class_logits.float())
        for scores, offsets in zip(scores_all, box_pred.float()):
            num_classes = scores.shape[-1]
            flat = scores.reshape(-1)
            keep = torch.nonzero(flat > score_thr).squeeze(1)
            if keep.numel() > pre_nms_top_k:
                top = torch.topk(flat[keep], pre_nms_top_k).indices
                keep = keep[top]
            anchor_idx = keep // num_classes
            class_idx = keep % num_classes
            boxes = decode_boxes(offsets[anchor_idx], anchor_boxes[anchor_idx])
            boxes = torch.minimum(boxes.clamp(min=0), limits)
            cand_scores = flat[keep]
            valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
            boxes, cand_scores, class_idx = boxes[valid], cand_scores[valid], class_idx[valid]
            # IoU is symmetric in the axes, so (y, x) boxes work as (x, y) boxes here
            kept = batched_nms(boxes, cand_scores, class_idx, nms_iou)[:max_dets]
            results.append([
                Detection(int(class_idx[i]), float(cand_scores[i]), tuple(float(v) for v in boxes[i]))
                for i in kept.tolist()
            ])
    return results
