"""Horizontal anchor grids and max-IoU target assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import encode_boxes, iou_matrix

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class AnchorSet:
    """Anchors as an ``(N, 5)`` box array plus owning level and stride.

    Ordering is level-major, then row-major over the grid, then over
    (scale, ratio) pairs with ratio varying fastest.
    """

    boxes: np.ndarray
    level: np.ndarray
    strides: tuple
    per_location: int

    def __len__(self):
        return len(self.boxes)


def generate_anchors(image_size, strides, scales, ratios) -> AnchorSet:
    """Anchors centred on each cell of every feature level.

    ``scales`` are absolute side lengths in pixels; a ratio ``r`` gives
    ``w = s * sqrt(r)``, ``h = s / sqrt(r)``. All anchors have ``theta = 0``.
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    height, width = image_size
    if not strides or not scales or not ratios:
        raise ValueError("anchor config needs at least one stride, scale and ratio")
    shapes = [(s * np.sqrt(r), s / np.sqrt(r)) for s in scales for r in ratios]
    boxes, levels = [], []
    for lvl, stride in enumerate(strides):
        if height % stride or width % stride:
            raise ValueError(f"stride {stride} does not divide image size {image_size}")
        gy, gx = np.meshgrid(
            (np.arange(height // stride) + 0.5) * stride,
            (np.arange(width // stride) + 0.5) * stride,
            indexing="ij",
        )
        for cy, cx in zip(gy.ravel(), gx.ravel()):
            for w, h in shapes:
                boxes.append((cx, cy, w, h, 0.0))
                levels.append(lvl)
    return AnchorSet(np.array(boxes, dtype=float), np.array(levels, dtype=int),
                     tuple(strides), len(shapes))


@dataclass
class AssignmentResult:
    labels: np.ndarray         # class index, NEGATIVE or IGNORE
    matched_gt: np.ndarray     # gt index for positives, -1 otherwise
    gt_boxes: np.ndarray       # (N, 5) matched gt box; zeros for non-positives
    targets: np.ndarray        # (N, 5) encoded deltas; zeros for non-positives

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0


def match_from_iou(iou: np.ndarray, iou_pos: float = 0.5, iou_neg: float = 0.4):
    """Max-IoU labelling from an ``(anchors, gts)`` IoU matrix.

    Returns ``(state, matched)`` where ``state`` is 1 for positive, 0 for
    negative, -1 for ignore and ``matched`` is the gt index for positives.
    Each gt's best anchor is forced positive; when an anchor is the best for
    several gts it goes to the one it overlaps most (lowest index on ties).
    """
    if iou_neg > iou_pos:
        raise ValueError("iou_neg must not exceed iou_pos")
    n, g = iou.shape
    state = np.zeros(n, dtype=int)
    matched = np.full(n, -1, dtype=int)
    if g == 0:
        return state, matched
    best_gt = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(n), best_gt]
    state[best_iou >= iou_neg] = -1
    pos = best_iou >= iou_pos
    state[pos] = 1
    matched[pos] = best_gt[pos]

    best_anchor = np.argmax(iou, axis=0)
    forced = {}
    for j in range(g):
        i = int(best_anchor[j])
        if iou[i, j] <= 0:
            continue
        prev = forced.get(i)
        if prev is None or iou[i, j] > iou[i, prev]:
            forced[i] = j
    for i, j in forced.items():
        state[i] = 1
        matched[i] = j
    return state, matched


def assign(anchors, gt_boxes, gt_classes, iou_pos: float = 0.5,
           iou_neg: float = 0.4) -> AssignmentResult:
    """Label anchors against ground-truth rotated boxes.

    Anchors with max IoU ``>= iou_pos`` are positives of their best gt,
    ``< iou_neg`` negatives, the rest ignored; each gt's best-overlapping
    anchor is always positive. A gt that overlaps no anchor at all gets none.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=float)
    gt = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    gt_classes = np.asarray(gt_classes, dtype=int).reshape(-1)
    n = len(boxes)
    labels = np.full(n, NEGATIVE, dtype=int)
    gt_rows = np.zeros((n, 5))
    targets = np.zeros((n, 5))
    if len(gt) == 0:
        return AssignmentResult(labels, np.full(n, -1, dtype=int), gt_rows, targets)
    state, matched = match_from_iou(iou_matrix(boxes, gt), iou_pos, iou_neg)
    labels[state == -1] = IGNORE
    pos = state == 1
    labels[pos] = gt_classes[matched[pos]]
    gt_rows[pos] = gt[matched[pos]]
    targets[pos] = encode_boxes(boxes[pos], gt_rows[pos])
    return AssignmentResult(labels, matched, gt_rows, targets)
