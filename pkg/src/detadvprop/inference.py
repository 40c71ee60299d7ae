"""Batched prediction and evaluation of a trained detector."""

import torch

from .detector.postprocess import decode_and_nms
from .evaluation import evaluate


def predict(state, images, branch=0, batch_size=64, score_thr=0.05, nms_iou=0.5, max_dets=100):
    """Detections for every image, computed in inference mode."""
    state.eval()
    anchors = state.anchors(images.shape[-2:])
    detections = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits, boxes = state(images[start:start + batch_size], branch)
            detections.extend(decode_and_nms(logits, boxes, anchors, score_thr, nms_iou, max_dets))
    return detections


def evaluate_model(state, images, annotations, class_names=None, max_dets=100, **kwargs):
    detections = predict(state, images, max_dets=max_dets, **kwargs)
    return evaluate(detections, annotations, state.config.num_classes, max_dets=max_dets,
                    class_names=class_names)
