"""COCO-style detection metrics, corruption-grid aggregation and rPC."""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalReport:
    map: float
    ap50: float
    ap75: float
    per_class_ap: Dict[str, float] = field(default_factory=dict)
    per_variant_map: Dict[str, float] = field(default_factory=dict)
    mean_corrupted_map: Optional[float] = None
    rpc_percent: Optional[float] = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def iou(box_a, box_b):
    """IoU of two ``(ymin, xmin, ymax, xmax)`` boxes; 0 for disjoint or zero-area boxes."""
    ih = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    iw = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(dets, gts):
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d = np.asarray(dets, dtype=np.float64)[:, None, :]
    g = np.asarray(gts, dtype=np.float64)[None, :, :]
    ih = np.minimum(d[..., 2], g[..., 2]) - np.maximum(d[..., 0], g[..., 0])
    iw = np.minimum(d[..., 3], g[..., 3]) - np.maximum(d[..., 1], g[..., 1])
    inter = np.where((ih > 0) & (iw > 0), ih * iw, 0.0)
    area_d = (d[..., 2] - d[..., 0]) * (d[..., 3] - d[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    union = area_d + area_g - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def interpolated_ap(tp, num_gt):
    """101-point interpolated AP from a score-ordered true-positive flag sequence."""
    tp = np.asarray(tp, dtype=np.int64)
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall at or beyond this rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return math.fsum(q.tolist()) / len(RECALL_POINTS)


def _match(order, det_image, det_boxes, gt_by_image, threshold):
    """Greedy matching of score-ordered detections to unmatched ground truth."""
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gt_by_image.items()}
    ious = {}
    tp = []
    for d in order:
        img = det_image[d]
        gts = gt_by_image.get(img, [])
        if len(gts) == 0:
            tp.append(0)
            continue
        if d not in ious:
            ious[d] = _iou_matrix([det_boxes[d]], gts)[0]
        candidates = np.where(~matched[img] & (ious[d] >= threshold), ious[d], -1.0)
        best = int(np.argmax(candidates))
        if candidates[best] >= 0:
            matched[img][best] = True
            tp.append(1)
        else:
            tp.append(0)
    return tp


def evaluate(detections, annotations, num_classes, iou_thresholds=IOU_THRESHOLDS, max_dets=100,
             class_names=None):
    """COCO-protocol mAP, AP50 and AP75 (in percent) over a set of images.

    ``detections[i]`` holds the detections of image ``i`` and
    ``annotations[i]`` its ground truth. Each image keeps its ``max_dets``
    highest-scoring detections. Classes without ground truth are left out of
    the mean.
    """
    if len(detections) != len(annotations):
        raise ValueError("need one detection list per annotated image")
    iou_thresholds = tuple(float(t) for t in iou_thresholds)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]

    det_image, det_boxes, det_scores, det_classes = [], [], [], []
    gt = {c: {} for c in range(num_classes)}
    for img, (dets, ann) in enumerate(zip(detections, annotations)):
        for box, cls in zip(ann.boxes, ann.classes):
            if not 0 <= cls < num_classes:
                raise ValueError(f"ground-truth class {cls} outside [0, {num_classes})")
            gt[cls].setdefault(img, []).append(box)
        ordered = sorted(dets, key=lambda d: -d.score)[:max_dets]
        for det in ordered:
            if not 0 <= det.class_id < num_classes:
                raise ValueError(f"detection class {det.class_id} outside [0, {num_classes})")
            det_image.append(img)
            det_boxes.append(det.box)
            det_scores.append(det.score)
            det_classes.append(det.class_id)
    det_scores = np.asarray(det_scores, dtype=np.float64)
    det_classes = np.asarray(det_classes, dtype=np.int64)

    ap_table = {}
    for cls in range(num_classes):
        num_gt = sum(len(boxes) for boxes in gt[cls].values())
        if num_gt == 0:
            continue
        members = np.nonzero(det_classes == cls)[0]
        order = members[np.argsort(-det_scores[members], kind="mergesort")].tolist()
        ap_table[cls] = [
            interpolated_ap(_match(order, det_image, det_boxes, gt[cls], t), num_gt) for t in iou_thresholds
        ]
    if not ap_table:
        raise UndefinedMetricError("no ground-truth objects to evaluate against")

    def mean(values):
        return math.fsum(values) / len(values)

    def at(threshold):
        if threshold not in iou_thresholds:
            return float("nan")
        k = iou_thresholds.index(threshold)
        return 100.0 * mean([aps[k] for aps in ap_table.values()])

    per_class = {names[c]: 100.0 * mean(aps) for c, aps in ap_table.items()}
    return EvalReport(
        map=100.0 * mean([mean(aps) for aps in ap_table.values()]),
        ap50=at(0.5),
        ap75=at(0.75),
        per_class_ap=per_class,
    )


def variant_key(kind, severity):
    return f"{kind}/{int(severity)}"


def rpc(clean_map, mean_corrupted_map):
    """Relative performance under corruption, in percent, rounded to 0.1."""
    if not clean_map > 0:
        raise UndefinedMetricError("rPC is undefined for a clean mAP of 0")
    return round(100.0 * mean_corrupted_map / clean_map, 1)


def evaluate_grid(variant_maps, clean_report, expected=None):
    """Fill the corruption fields of ``clean_report`` from per-variant mAPs.

    ``variant_maps`` maps ``(kind, severity)`` to an mAP or an EvalReport.
    The corrupted mAP is the unweighted mean over all variants.
    """
    maps = {}
    for (kind, severity), value in variant_maps.items():
        maps[variant_key(kind, severity)] = float(value.map if isinstance(value, EvalReport) else value)
    if expected is not None:
        missing = [variant_key(k, s) for k, s in expected if variant_key(k, s) not in maps]
        if missing:
            raise KeyError(f"missing corruption variants: {', '.join(missing)}")
    if not maps:
        raise KeyError("missing corruption variants: none were evaluated")
    mean_corrupted = math.fsum(maps.values()) / len(maps)
    report = EvalReport(**asdict(clean_report))
    report.per_variant_map = dict(sorted(maps.items()))
    report.mean_corrupted_map = mean_corrupted
    report.rpc_percent = rpc(report.map, mean_corrupted) if report.map > 0 else None
    return report
