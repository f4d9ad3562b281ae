"""Rotated-rectangle geometry.

Boxes are ``(cx, cy, w, h, theta)`` with theta in radians. The canonical form
is the long-edge convention: ``w >= h`` and ``theta`` in ``[-pi/2, pi/2)``.
Squares are ambiguous under a quarter turn; their angle is folded into
``[0, pi/2)``.

Scalar helpers operate on :class:`RotatedBox`. The plural helpers
(``boxes_to_quads``, ``encode_boxes``, ``decode_boxes``, ``iou_matrix``) take
``(N, 5)`` float arrays and do not normalize, because training code relies on
the raw parameterization (e.g. anchors with ``w < h`` at theta 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

HALF_PI = math.pi / 2
LOG_DELTA_CLAMP = 4.0


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into ``[-pi/2, pi/2)``."""
    return (theta + HALF_PI) % math.pi - HALF_PI


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_array(cls, arr) -> "RotatedBox":
        cx, cy, w, h, t = (float(v) for v in arr)
        return cls(cx, cy, w, h, t)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=float)

    @property
    def area(self) -> float:
        return self.w * self.h

    def normalized(self) -> "RotatedBox":
        """Return the equivalent box under the long-edge convention."""
        w, h, t = self.w, self.h, self.theta
        if w < h:
            w, h, t = h, w, t + HALF_PI
        if w == h:
            t = t % HALF_PI
            if t >= HALF_PI:  # float edge case of the modulo
                t = 0.0
        else:
            t = float(wrap_angle(t))
        return RotatedBox(self.cx, self.cy, w, h, t)

    def translated(self, dx: float, dy: float) -> "RotatedBox":
        return RotatedBox(self.cx + dx, self.cy + dy, self.w, self.h, self.theta)


@dataclass(frozen=True)
class Gaussian2D:
    mu: np.ndarray
    sigma: np.ndarray


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def box_to_gaussian(b: RotatedBox) -> Gaussian2D:
    """Gaussian whose covariance is ``R diag(w^2/4, h^2/4) R^T``."""
    r = rotation(b.theta)
    sigma = r @ np.diag([b.w * b.w / 4.0, b.h * b.h / 4.0]) @ r.T
    sigma = 0.5 * (sigma + sigma.T)
    return Gaussian2D(np.array([b.cx, b.cy], dtype=float), sigma)


def boxes_to_gaussians(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`box_to_gaussian` for ``(N, 5)`` arrays.

    Returns ``mu`` of shape ``(N, 2)`` and ``sigma`` of shape ``(N, 2, 2)``.
    """
    boxes = np.asarray(boxes, dtype=float)
    c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    a = boxes[:, 2] ** 2 / 4.0
    b = boxes[:, 3] ** 2 / 4.0
    sxx = a * c * c + b * s * s
    syy = a * s * s + b * c * c
    sxy = (a - b) * c * s
    sigma = np.stack([np.stack([sxx, sxy], -1), np.stack([sxy, syy], -1)], -2)
    return boxes[:, :2].copy(), sigma


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

def box_to_quad(b: RotatedBox) -> np.ndarray:
    """Corners of ``b`` as a ``(4, 2)`` array, counter-clockwise."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = b.w / 2.0, b.h / 2.0
    local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
    return np.array([(b.cx + c * x - s * y, b.cy + s * x + c * y) for x, y in local])


def boxes_to_quads(boxes: np.ndarray) -> np.ndarray:
    """Vectorized :func:`box_to_quad`; returns ``(N, 4, 2)``."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    hw, hh = boxes[:, 2] / 2.0, boxes[:, 3] / 2.0
    sx = np.array([-1.0, 1.0, 1.0, -1.0])
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    lx = sx[None, :] * hw[:, None]
    ly = sy[None, :] * hh[:, None]
    x = boxes[:, 0:1] + c[:, None] * lx - s[:, None] * ly
    y = boxes[:, 1:2] + s[:, None] * lx + c[:, None] * ly
    return np.stack([x, y], axis=-1)


def polygon_area(pts) -> float:
    """Signed shoelace area; positive for counter-clockwise winding."""
    n = len(pts)
    acc = 0.0
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def quad_to_box(quad) -> RotatedBox:
    """Minimum-area rotated rectangle enclosing a (near-)rectangular quad.

    Candidate orientations are the four quad edges; for a quadrilateral whose
    hull is the quad itself this is exact.
    """
    q = np.asarray(quad, dtype=float).reshape(4, 2)
    area = polygon_area(q.tolist())
    scale = float(np.max(np.ptp(q, axis=0))) if q.size else 0.0
    if scale == 0.0 or abs(area) <= 1e-12 * scale * scale:
        raise ValueError("degenerate quad: corners are collinear or coincident")
    if area < 0:
        q = q[::-1]

    best = None
    for i in range(4):
        ex, ey = q[(i + 1) % 4] - q[i]
        theta = math.atan2(ey, ex)
        c, s = math.cos(theta), math.sin(theta)
        u = q[:, 0] * c + q[:, 1] * s
        v = -q[:, 0] * s + q[:, 1] * c
        w, h = u.max() - u.min(), v.max() - v.min()
        if best is None or w * h < best[0] * (1 - 1e-12):
            uc, vc = (u.max() + u.min()) / 2, (v.max() + v.min()) / 2
            best = (w * h, uc * c - vc * s, uc * s + vc * c, w, h, theta)
    _, cx, cy, w, h, theta = best
    return RotatedBox(float(cx), float(cy), float(w), float(h), theta).normalized()


def _clip(subject: list, clipper: list) -> list:
    """Sutherland-Hodgman: clip convex ``subject`` by convex CCW ``clipper``."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _corners(b) -> list:
    cx, cy, w, h, t = (float(v) for v in b)
    c, s = math.cos(t), math.sin(t)
    hw, hh = w / 2.0, h / 2.0
    return [(cx + c * x - s * y, cy + s * x + c * y)
            for x, y in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))]


def intersection_area(a, b) -> float:
    """Area of overlap between two boxes given as 5-sequences."""
    poly = _clip(_corners(a), _corners(b))
    if len(poly) < 3:
        return 0.0
    return max(polygon_area(poly), 0.0)


def _iou5(a, b) -> float:
    # bounding circles disjoint -> no overlap
    dx, dy = a[0] - b[0], a[1] - b[1]
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if dx * dx + dy * dy >= (ra + rb) ** 2:
        return 0.0
    inter = intersection_area(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    """Exact IoU of two rotated boxes by convex polygon clipping."""
    return _iou5(
        (a.cx, a.cy, a.w, a.h, a.theta), (b.cx, b.cy, b.w, b.h, b.theta)
    )


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise rotated IoU between ``(N, 5)`` and ``(M, 5)`` arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 5)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 5)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    cand = np.argwhere(d2 < (ra[:, None] + rb[None, :]) ** 2)
    al, bl = a.tolist(), b.tolist()
    for i, j in cand:
        out[i, j] = _iou5(al[i], bl[j])
    return out


# ---------------------------------------------------------------------------
# Delta coding
# ---------------------------------------------------------------------------

def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Five-parameter deltas of ``targets`` relative to ``anchors`` (both ``(N, 5)``)."""
    a = np.asarray(anchors, dtype=float).reshape(-1, 5)
    t = np.asarray(targets, dtype=float).reshape(-1, 5)
    return np.stack([
        (t[:, 0] - a[:, 0]) / a[:, 2],
        (t[:, 1] - a[:, 1]) / a[:, 3],
        np.log(t[:, 2] / a[:, 2]),
        np.log(t[:, 3] / a[:, 3]),
        wrap_angle(t[:, 4] - a[:, 4]),
    ], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; log-size deltas are clamped to +-4.

    The angle is ``anchor_theta + d_theta`` without wrapping.
    """
    a = np.asarray(anchors, dtype=float).reshape(-1, 5)
    d = np.asarray(deltas, dtype=float).reshape(-1, 5)
    dw = np.clip(d[:, 2], -LOG_DELTA_CLAMP, LOG_DELTA_CLAMP)
    dh = np.clip(d[:, 3], -LOG_DELTA_CLAMP, LOG_DELTA_CLAMP)
    return np.stack([
        a[:, 0] + d[:, 0] * a[:, 2],
        a[:, 1] + d[:, 1] * a[:, 3],
        a[:, 2] * np.exp(dw),
        a[:, 3] * np.exp(dh),
        a[:, 4] + d[:, 4],
    ], axis=1)


def normalize_boxes(boxes: np.ndarray) -> np.ndarray:
    """Vectorized long-edge normalization of ``(N, 5)`` boxes."""
    b = np.array(boxes, dtype=float).reshape(-1, 5)
    swap = b[:, 2] < b[:, 3]
    b[swap, 2], b[swap, 3] = b[swap, 3].copy(), b[swap, 2].copy()
    b[swap, 4] += HALF_PI
    square = b[:, 2] == b[:, 3]
    b[~square, 4] = wrap_angle(b[~square, 4])
    t = b[square, 4] % HALF_PI
    t[t >= HALF_PI] = 0.0
    b[square, 4] = t
    return b


def encode_deltas(anchor: RotatedBox, target: RotatedBox) -> np.ndarray:
    """``(dx, dy, dw, dh, dtheta)`` of ``target`` relative to ``anchor``."""
    return encode_boxes(anchor.as_array()[None], target.as_array()[None])[0]


def decode_deltas(anchor: RotatedBox, deltas) -> RotatedBox:
    """Box for ``deltas`` relative to ``anchor``, in long-edge form."""
    out = decode_boxes(anchor.as_array()[None], np.asarray(deltas, dtype=float)[None])[0]
    return RotatedBox.from_array(out).normalized()
