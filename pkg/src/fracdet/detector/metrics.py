"""IoU, non-maximum suppression and COCO-style average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Box = tuple[float, float, float, float]
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(boxes: list[Box], scores: list[float], threshold: float = 0.5) -> list[int]:
    """Indices kept by greedy NMS, highest score first (ties keep the lower index)."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= threshold for j in keep):
            keep.append(i)
    return keep


@dataclass
class DetectionResult:
    detections: list[list[tuple[Box, float]]] = field(default_factory=list)
    ap_per_threshold: dict[float, float] = field(default_factory=dict)

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0.5]

    @property
    def map(self) -> float:
        return float(np.mean(list(self.ap_per_threshold.values())))

    def summary(self) -> dict:
        return {
            "ap50": self.ap50,
            "map_50_95": self.map,
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
        }


def match_detections(predictions, ground_truth, threshold: float) -> tuple[list[bool], int]:
    """Greedy one-to-one matching in descending confidence order.

    Each prediction takes the unmatched ground-truth box of its image with the
    highest IoU, provided that IoU reaches ``threshold``. Returns TP flags in
    ranked order and the ground-truth count.
    """
    ranked = []
    for img, preds in enumerate(predictions):
        for k, (box, conf) in enumerate(preds):
            ranked.append((-conf, img, k, box))
    ranked.sort(key=lambda r: r[:3])
    taken = [[False] * len(g) for g in ground_truth]
    flags = []
    for _, img, _, box in ranked:
        best, best_iou = -1, threshold
        for j, gt in enumerate(ground_truth[img]):
            if taken[img][j]:
                continue
            v = iou(box, gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[img][best] = True
        flags.append(best >= 0)
    return flags, sum(len(g) for g in ground_truth)


def average_precision(tp_flags: list[bool], n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve.

    With no ground truth, AP is 1.0 when there are also no predictions and 0.0
    otherwise.
    """
    if n_gt == 0:
        return 1.0 if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags, dtype=np.float64)
    fp = np.cumsum([not f for f in tp_flags], dtype=np.float64)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def evaluate_map(predictions, ground_truth, thresholds=IOU_THRESHOLDS) -> DetectionResult:
    """``predictions[i]`` is a list of (box, confidence) for image i; ``ground_truth[i]`` a list of boxes."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth cover different numbers of images")
    result = DetectionResult(detections=[list(p) for p in predictions])
    for t in thresholds:
        flags, n_gt = match_detections(predictions, ground_truth, t)
        result.ap_per_threshold[float(t)] = average_precision(flags, n_gt)
    return result
