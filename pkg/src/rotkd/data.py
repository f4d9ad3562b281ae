"""Synthetic rotated-object scenes, DOTA annotation I/O, tiling and merge-back."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import Detection, batched_nms
from .geometry import RotatedBox, box_to_quad, boxes_to_quads, quad_to_box

DOTA_CLASSES = (
    "plane", "baseball-diamond", "bridge", "ground-track-field", "small-vehicle",
    "large-vehicle", "ship", "tennis-court", "basketball-court", "storage-tank",
    "soccer-ball-field", "roundabout", "harbor", "swimming-pool", "helicopter",
)
_HEADER_PREFIXES = ("imagesource:", "gsd:")


class AnnotationError(ValueError):
    pass


@dataclass
class Scene:
    """Image in ``[0, 1]`` plus annotations as parallel arrays."""

    image: np.ndarray                      # (H, W)
    boxes: np.ndarray                      # (K, 5)
    classes: np.ndarray                    # (K,)
    difficult: np.ndarray                  # (K,) bool
    clipped: np.ndarray | None = None      # (K,) bool, set by crop_scene
    image_id: str = "0"

    @property
    def annotations(self) -> list:
        return [(RotatedBox.from_array(b), int(c), bool(d))
                for b, c, d in zip(self.boxes, self.classes, self.difficult)]

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class SceneConfig:
    image_size: int | tuple = 64
    num_objects: tuple = (2, 4)
    long_side: tuple = (10.0, 22.0)
    aspect: tuple = (1.0, 2.5)
    num_classes: int = 3
    intensity: tuple = (0.35, 0.95)       # class 0 .. C-1 spread linearly
    noise_std: float = 0.1
    difficult_prob: float = 0.0
    margin: float = 2.0                   # keep whole objects this far from the border
    supersample: int = 4
    max_tries: int = 200

    def class_intensities(self) -> np.ndarray:
        if self.num_classes == 1:
            return np.array([self.intensity[1]])
        return np.linspace(self.intensity[0], self.intensity[1], self.num_classes)

    @property
    def shape(self) -> tuple:
        s = self.image_size
        return (s, s) if isinstance(s, int) else tuple(s)


def render_coverage(box, shape, supersample: int = 4) -> tuple:
    """Fraction of each pixel covered by ``box``, on its bounding window.

    Pixel ``(r, c)`` spans ``[c, c+1) x [r, r+1)`` in box coordinates. Returns
    ``(coverage, (r0, c0))`` where ``coverage`` is the window array.
    """
    h, w = shape
    quad = boxes_to_quads(np.asarray(box, dtype=float)[None])[0]
    c0 = max(int(math.floor(quad[:, 0].min())), 0)
    c1 = min(int(math.ceil(quad[:, 0].max())), w)
    r0 = max(int(math.floor(quad[:, 1].min())), 0)
    r1 = min(int(math.ceil(quad[:, 1].max())), h)
    if c1 <= c0 or r1 <= r0:
        return np.zeros((0, 0)), (r0, c0)
    sub = (np.arange(supersample) + 0.5) / supersample
    ys = (np.arange(r0, r1)[:, None] + sub[None, :]).ravel()
    xs = (np.arange(c0, c1)[:, None] + sub[None, :]).ravel()
    cx, cy, bw, bh, t = (float(v) for v in box)
    c, s = math.cos(t), math.sin(t)
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (np.abs(u) <= bw / 2) & (np.abs(v) <= bh / 2)
    cov = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    return cov, (r0, c0)


def _separated(box, placed, gap: float = 2.0) -> bool:
    # conservative: inflated bounding circles must not touch
    for other in placed:
        d = math.hypot(box[0] - other[0], box[1] - other[1])
        if d < 0.5 * (math.hypot(box[2], box[3]) + math.hypot(other[2], other[3])) + gap:
            return False
    return True


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), image_id: str | None = None) -> Scene:
    """Render non-overlapping filled rectangles with class intensity plus noise."""
    rng = np.random.default_rng(seed)
    h, w = config.shape
    lo, hi = config.num_objects
    n = int(rng.integers(lo, hi + 1))
    levels = config.class_intensities()
    boxes, classes = [], []
    tries = 0
    while len(boxes) < n and tries < config.max_tries * max(n, 1):
        tries += 1
        long_side = rng.uniform(*config.long_side)
        short = long_side / rng.uniform(*config.aspect)
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        half = 0.5 * math.hypot(long_side, short) + config.margin
        if 2 * half >= min(h, w):
            continue
        cx = rng.uniform(half, w - half)
        cy = rng.uniform(half, h - half)
        box = RotatedBox(cx, cy, long_side, short, theta).normalized()
        arr = box.as_array()
        if not _separated(arr, boxes):
            continue
        boxes.append(arr)
        classes.append(int(rng.integers(config.num_classes)))
    img = np.zeros((h, w))
    for b, c in zip(boxes, classes):
        cov, (r0, c0) = render_coverage(b, (h, w), config.supersample)
        if cov.size:
            win = img[r0:r0 + cov.shape[0], c0:c0 + cov.shape[1]]
            np.maximum(win, levels[c] * cov, out=win)
    img = np.clip(img + rng.normal(0.0, config.noise_std, size=img.shape), 0.0, 1.0)
    difficult = rng.random(len(boxes)) < config.difficult_prob
    return Scene(img, np.array(boxes).reshape(-1, 5), np.array(classes, dtype=int),
                 difficult, image_id=str(seed) if image_id is None else image_id)


# ---------------------------------------------------------------------------
# DOTA text formats
# ---------------------------------------------------------------------------

def parse_dota_annotation(text: str, classes=DOTA_CLASSES) -> list:
    """Parse DOTA v1.0 label text into ``(RotatedBox, class_index, difficult)``."""
    index = {name: i for i, name in enumerate(classes)}
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(_HEADER_PREFIXES):
            continue
        tok = line.split()
        if len(tok) != 10:
            raise AnnotationError(f"line {lineno}: expected 10 fields, got {len(tok)}: {line!r}")
        try:
            coords = [float(t) for t in tok[:8]]
            difficult = int(tok[9])
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        if tok[8] not in index:
            raise AnnotationError(f"line {lineno}: unknown category {tok[8]!r}")
        try:
            box = quad_to_box(np.array(coords).reshape(4, 2))
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        out.append((box, index[tok[8]], bool(difficult)))
    return out


def serialize_dota_annotation(annotations, classes=DOTA_CLASSES) -> str:
    lines = []
    for box, cls, difficult in annotations:
        q = box_to_quad(box)
        coords = " ".join(f"{v:.8f}" for v in q.ravel())
        lines.append(f"{coords} {classes[cls]} {int(bool(difficult))}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_task1(detections, out_dir, classes=DOTA_CLASSES) -> list:
    """Write DOTA Task-1 files ``Task1_<class>.txt``; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_cls = {c: [] for c in range(len(classes))}
    for d in detections:
        by_cls[d.cls].append(d)
    paths = []
    for c, dets in by_cls.items():
        path = out_dir / f"Task1_{classes[c]}.txt"
        rows = []
        for d in dets:
            q = " ".join(f"{v:.6f}" for v in box_to_quad(d.box).ravel())
            rows.append(f"{d.image_id} {d.score:.6f} {q}")
        path.write_text("\n".join(rows) + ("\n" if rows else ""))
        paths.append(path)
    return paths


def read_task1(in_dir, classes=DOTA_CLASSES) -> list:
    dets = []
    for c, name in enumerate(classes):
        path = Path(in_dir) / f"Task1_{name}.txt"
        if not path.exists():
            continue
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 10:
                raise AnnotationError(f"{path}:{lineno}: expected 10 fields, got {len(tok)}")
            box = quad_to_box(np.array([float(t) for t in tok[2:]]).reshape(4, 2))
            dets.append(Detection(box, c, float(tok[1]), tok[0]))
    return dets


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TileSpec:
    tile_size: int
    overlap: int
    image_size: tuple                       # (H, W)
    origins: tuple                          # ((x0, y0), ...) row-major
    pad_value: float = 0.0

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile_size:
            raise ValueError("overlap must satisfy 0 <= overlap < tile_size")


def _axis_offsets(dim: int, tile: int, stride: int) -> list:
    offsets, o = [], 0
    while True:
        offsets.append(max(0, min(o, dim - tile)))
        if o + tile >= dim:
            return offsets
        o += stride


def plan_tiles(image_size, tile: int = 600, overlap: int = 150) -> TileSpec:
    """Tile origins with stride ``tile - overlap``; the last tile is pulled back
    to end at the border. Images smaller than a tile get one padded tile."""
    if not 0 <= overlap < tile:
        raise ValueError("overlap must satisfy 0 <= overlap < tile")
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    stride = tile - overlap
    ys = _axis_offsets(h, tile, stride)
    xs = _axis_offsets(w, tile, stride)
    return TileSpec(tile, overlap, (h, w), tuple((x, y) for y in ys for x in xs))


def crop_scene(scene: Scene, origin, size) -> Scene:
    """Cut a tile out of ``scene`` (zero-padded past the border).

    A gt is kept when its centre lies in the tile; ``clipped`` marks kept
    boxes whose polygon leaves the tile.
    """
    x0, y0 = (int(v) for v in origin)
    tw, th = (size, size) if isinstance(size, int) else size
    h, w = scene.image.shape
    img = np.zeros((th, tw))
    ys, xs = max(y0, 0), max(x0, 0)
    ye, xe = min(y0 + th, h), min(x0 + tw, w)
    if ye > ys and xe > xs:
        img[ys - y0:ye - y0, xs - x0:xe - x0] = scene.image[ys:ye, xs:xe]
    b = scene.boxes.copy()
    b[:, 0] -= x0
    b[:, 1] -= y0
    keep = (b[:, 0] >= 0) & (b[:, 0] < tw) & (b[:, 1] >= 0) & (b[:, 1] < th)
    b = b[keep]
    q = boxes_to_quads(b)
    clipped = ((q[..., 0].min(axis=1) < 0) | (q[..., 0].max(axis=1) > tw)
               | (q[..., 1].min(axis=1) < 0) | (q[..., 1].max(axis=1) > th))
    return Scene(img, b.reshape(-1, 5), scene.classes[keep], scene.difficult[keep],
                 clipped, image_id=f"{scene.image_id}__{x0}_{y0}")


def merge_detections(per_tile, origins, nms_iou: float = 0.3, image_id: str | None = None) -> list:
    """Shift tile detections to the image frame and run per-class NMS.

    Detections are concatenated in (tile, detection) order before NMS so the
    reduction is deterministic.
    """
    merged = []
    for dets, (x0, y0) in zip(per_tile, origins):
        for d in dets:
            merged.append(Detection(d.box.translated(x0, y0), d.cls, d.score,
                                    d.image_id if image_id is None else image_id))
    return batched_nms(merged, nms_iou)


# ---------------------------------------------------------------------------
# Synthetic dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    config: SceneConfig
    train_seeds: list
    test_seeds: list
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


def build_dataset(config: SceneConfig, n_train: int, n_test: int, seed: int = 0) -> Dataset:
    """Train/test scenes with disjoint per-scene seeds derived from ``seed``."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n_train + n_test)]
    train_seeds, test_seeds = seeds[:n_train], seeds[n_train:]
    return Dataset(
        config, train_seeds, test_seeds,
        [generate_scene(s, config, image_id=f"train_{i}") for i, s in enumerate(train_seeds)],
        [generate_scene(s, config, image_id=f"test_{i}") for i, s in enumerate(test_seeds)],
    )


def dataset_manifest(ds: Dataset) -> dict:
    def records(scenes, seeds):
        return [{
            "image_id": sc.image_id, "seed": s,
            "annotations": [
                {"box": [round(float(v), 10) for v in b], "class": int(c), "difficult": bool(d)}
                for b, c, d in zip(sc.boxes, sc.classes, sc.difficult)
            ],
        } for sc, s in zip(scenes, seeds)]
    cfg = asdict(ds.config)
    return {
        "format": "rotkd-synthetic-manifest",
        "version": 1,
        "scene_config": cfg,
        "train": records(ds.train, ds.train_seeds),
        "test": records(ds.test, ds.test_seeds),
    }


def write_manifest(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_manifest(ds), indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> Dataset:
    """Rebuild a dataset from its manifest by regenerating every scene."""
    rec = json.loads(Path(path).read_text())
    if rec.get("format") != "rotkd-synthetic-manifest":
        raise ValueError(f"{path}: not a synthetic dataset manifest")
    raw = rec["scene_config"]
    cfg = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    train = [r["seed"] for r in rec["train"]]
    test = [r["seed"] for r in rec["test"]]
    return Dataset(
        cfg, train, test,
        [generate_scene(s, cfg, image_id=r["image_id"]) for s, r in zip(train, rec["train"])],
        [generate_scene(s, cfg, image_id=r["image_id"]) for s, r in zip(test, rec["test"])],
    )
