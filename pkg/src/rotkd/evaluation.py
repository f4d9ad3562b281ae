"""Rotated NMS and average-precision metrics (DOTA mAP@0.5, AP75, COCO mAP)."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import RotatedBox, iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    box: RotatedBox
    cls: int
    score: float
    image_id: str = "0"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    box: RotatedBox
    cls: int
    image_id: str = "0"
    difficult: bool = False


def _as_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 5))
    return np.array([[b.cx, b.cy, b.w, b.h, b.theta] for b in boxes], dtype=float)


def rotated_nms(detections, iou_threshold: float) -> list:
    """Greedy NMS over one class; returns kept detections by descending score.

    A detection is dropped when its IoU with an already kept one exceeds
    ``iou_threshold``. Equal scores keep input order.
    """
    dets = list(detections)
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = _as_array([dets[i].box for i in order])
    iou = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for k in range(len(order)):
        if suppressed[k]:
            continue
        kept.append(dets[order[k]])
        suppressed |= iou[k] > iou_threshold
    return kept


def batched_nms(detections, iou_threshold: float) -> list:
    """:func:`rotated_nms` applied per (image, class); output grouped in that order."""
    groups = defaultdict(list)
    for d in detections:
        groups[(d.image_id, d.cls)].append(d)
    out = []
    for key in sorted(groups):
        out.extend(rotated_nms(groups[key], iou_threshold))
    return out


def match_detections(detections, ground_truths, iou_threshold: float):
    """Greedy score-order matching for a single class.

    Returns ``(order, status, n_pos)``: detection indices sorted by descending
    score, a status per sorted detection (1 true positive, 0 false positive,
    -1 ignored because it only hits a difficult gt) and the number of
    non-difficult gts.
    """
    dets = list(detections)
    gts_by_image = defaultdict(list)
    for g in ground_truths:
        gts_by_image[g.image_id].append(g)
    n_pos = sum(1 for g in ground_truths if not g.difficult)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)

    ious = {}
    for img, gts in gts_by_image.items():
        idx = [i for i in range(len(dets)) if dets[i].image_id == img]
        if idx:
            m = iou_matrix(_as_array([dets[i].box for i in idx]), _as_array([g.box for g in gts]))
            for row, i in enumerate(idx):
                ious[i] = m[row]
    matched = {img: np.zeros(len(g), dtype=bool) for img, g in gts_by_image.items()}
    difficult = {img: np.array([g.difficult for g in gts], dtype=bool)
                 for img, gts in gts_by_image.items()}

    status = np.zeros(len(order), dtype=int)
    for k, i in enumerate(order):
        img = dets[i].image_id
        if i not in ious:
            continue
        ov = ious[i]
        hit = ov >= iou_threshold
        cand = hit & ~matched[img] & ~difficult[img]
        if cand.any():
            j = int(np.argmax(np.where(cand, ov, -1.0)))
            matched[img][j] = True
            status[k] = 1
        elif (hit & difficult[img]).any():
            status[k] = -1
    return order, status, n_pos


@dataclass
class PRReport:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    n_gt: int
    ap: float
    defined: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "score", "recall", "precision"])
        for k, (s, r, p) in enumerate(zip(self.scores, self.recall, self.precision)):
            w.writerow([k + 1, f"{s:.6f}", f"{r:.6f}", f"{p:.6f}"])
        return buf.getvalue()


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def pr_report(detections, ground_truths, iou_threshold: float) -> PRReport:
    """Precision/recall points behind :func:`average_precision`.

    Detections ignored through difficult gts are dropped from the curve.
    """
    dets = list(detections)
    order, status, n_pos = match_detections(dets, ground_truths, iou_threshold)
    keep = status >= 0
    scores = np.array([dets[i].score for i in order], dtype=float)[keep]
    tp = np.cumsum(status[keep] == 1)
    fp = np.cumsum(status[keep] == 0)
    if n_pos == 0:
        z = np.zeros(len(scores))
        return PRReport(z, z, scores, 0, 0.0, False)
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    ap = _all_point_ap(recall, precision) if len(scores) else 0.0
    return PRReport(recall, precision, scores, n_pos, ap, True)


def average_precision(detections, ground_truths, iou_threshold: float) -> float:
    """All-point interpolated AP for a single class (0 when there are no gts)."""
    return pr_report(detections, ground_truths, iou_threshold).ap


@dataclass
class EvalResult:
    per_class: dict                  # class -> {threshold: AP}
    map_dota: float
    ap75: float
    map_coco: float
    classes: list = field(default_factory=list)   # classes with >= 1 gt

    def to_dict(self, class_names=None) -> dict:
        def name(c):
            return class_names[c] if class_names else str(c)
        return {
            "map_dota": self.map_dota,
            "ap75": self.ap75,
            "map_coco": self.map_coco,
            "classes_evaluated": [name(c) for c in self.classes],
            "per_class": {
                name(c): {f"{t:.2f}": ap for t, ap in sorted(aps.items())}
                for c, aps in sorted(self.per_class.items())
            },
        }


def evaluate(detections, ground_truths, num_classes: int | None = None,
             thresholds=COCO_THRESHOLDS) -> EvalResult:
    """Per-class AP over IoU thresholds and the three headline means.

    Means run over classes that have at least one non-difficult gt.
    """
    dets_by_cls = defaultdict(list)
    for d in detections:
        dets_by_cls[d.cls].append(d)
    gts_by_cls = defaultdict(list)
    for g in ground_truths:
        gts_by_cls[g.cls].append(g)
    classes = sorted(set(gts_by_cls) | set(dets_by_cls)) if num_classes is None else list(range(num_classes))
    thresholds = tuple(sorted(set(thresholds) | {0.5, 0.75} | set(COCO_THRESHOLDS)))
    per_class = {}
    evaluated = []
    for c in classes:
        per_class[c] = {t: average_precision(dets_by_cls[c], gts_by_cls[c], t) for t in thresholds}
        if any(not g.difficult for g in gts_by_cls[c]):
            evaluated.append(c)
    if not evaluated:
        return EvalResult(per_class, 0.0, 0.0, 0.0, [])
    m50 = float(np.mean([per_class[c][0.5] for c in evaluated]))
    m75 = float(np.mean([per_class[c][0.75] for c in evaluated]))
    coco = float(np.mean([np.mean([per_class[c][t] for t in COCO_THRESHOLDS]) for c in evaluated]))
    return EvalResult(per_class, m50, m75, coco, evaluated)
