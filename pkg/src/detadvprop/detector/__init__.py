from .anchors import AnchorSet, generate_anchors
from .losses import LossBundle, detection_loss, focal_loss, huber_loss
from .model import (
    InputRangeError,
    SplitBatchNorm2d,
    TinyDetector,
    build_detector,
    count_parameters,
    forward,
    strip_auxiliary_branches,
)
from .postprocess import Detection, decode_and_nms
from .targets import Annotation, AnchorTargets, assign_targets, box_iou, stack_targets

__all__ = [
    "AnchorSet", "generate_anchors", "LossBundle", "detection_loss", "focal_loss", "huber_loss",
    "InputRangeError", "SplitBatchNorm2d", "TinyDetector", "build_detector", "count_parameters",
    "forward", "strip_auxiliary_branches", "Detection", "decode_and_nms", "Annotation",
    "AnchorTargets", "assign_targets", "box_iou", "stack_targets",
]
