"""A tiny single-level anchor-based detector in plain numpy.

Layout (NCHW, float64)::

    image -> 2x2 average pool
          -> conv3x3/s2 + LeakyReLU -> conv3x3/s2 + LeakyReLU   (stride 8)
          -> conv3x3 -> A*C class logits
          -> conv3x3 -> A*5 box deltas

The backbone ``width`` is the only difference between teacher and student.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

STRIDE = 8
CHECKPOINT_FORMAT = "rotkd-checkpoint"
CHECKPOINT_VERSION = 1
PRIOR_PROB = 0.01
LEAK = 0.1                     # a width-4 backbone loses plain ReLU units for good


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    width: int = 16
    num_classes: int = 3
    num_anchors: int = 6
    in_channels: int = 1

    def __post_init__(self):
        if self.image_size % STRIDE:
            raise ValueError(f"image_size must be a multiple of {STRIDE}")
        if min(self.width, self.num_classes, self.num_anchors, self.in_channels) < 1:
            raise ValueError("widths and counts must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE

    def shapes(self) -> dict:
        w, a, c = self.width, self.num_anchors, self.num_classes
        return {
            "conv1_w": (w, self.in_channels, 3, 3), "conv1_b": (w,),
            "conv2_w": (w, w, 3, 3), "conv2_b": (w,),
            "cls_w": (a * c, w, 3, 3), "cls_b": (a * c,),
            "reg_w": (a * 5, w, 3, 3), "reg_b": (a * 5,),
        }


def init_params(cfg: DetectorConfig, seed: int) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, focal prior on class bias."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cfg.shapes().items():
        if name.endswith("_w"):
            bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["cls_b"][:] = -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB)
    return params


def param_count(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


def _im2col(x, stride):
    b, ci, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = [xp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            for ky in range(3) for kx in range(3)]
    cols = np.stack(taps, axis=2)                       # (B, Ci, 9, Ho, Wo)
    cols = cols.transpose(0, 3, 4, 1, 2).reshape(b * ho * wo, ci * 9)
    return cols, (b, ci, h, w, ho, wo)


def _col2im(gcols, meta, stride):
    b, ci, h, w, ho, wo = meta
    g = gcols.reshape(b, ho, wo, ci, 9).transpose(0, 3, 4, 1, 2)
    gp = np.zeros((b, ci, h + 2, w + 2))
    for k in range(9):
        ky, kx = divmod(k, 3)
        gp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride] += g[:, :, k]
    return gp[:, :, 1:-1, 1:-1]


def _conv(x, wt, bias, stride):
    cols, meta = _im2col(x, stride)
    out = cols @ wt.reshape(wt.shape[0], -1).T + bias
    b, _, _, _, ho, wo = meta
    return out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2), (cols, meta)


def _conv_backward(gout, wt, conv_cache, stride, need_input_grad=True):
    cols, meta = conv_cache
    g = gout.transpose(0, 2, 3, 1).reshape(-1, wt.shape[0])
    gw = (g.T @ cols).reshape(wt.shape)
    gb = g.sum(axis=0)
    gx = _col2im(g @ wt.reshape(wt.shape[0], -1), meta, stride) if need_input_grad else None
    return gw, gb, gx


def _head_to_anchors(out, per_anchor):
    # (B, A*K, H, W) -> (B, H*W*A, K), anchor index = (y*W + x)*A + a
    b, ak, h, w = out.shape
    return out.transpose(0, 2, 3, 1).reshape(b, h * w * (ak // per_anchor), per_anchor)


def _anchors_to_head(g, shape):
    b, ak, h, w = shape
    return g.reshape(b, h, w, ak).transpose(0, 3, 1, 2)


def forward(params: dict, images: np.ndarray):
    """Run the detector on ``(B, C_in, H, W)`` or ``(B, H, W)`` images.

    Returns ``(logits, deltas, cache)`` with logits ``(B, N, C)`` and deltas
    ``(B, N, 5)`` in anchor order.
    """
    x = np.asarray(images, dtype=float)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) images, got shape {x.shape}")
    in_ch = params["conv1_w"].shape[1]
    if x.shape[1] != in_ch or x.shape[2] % STRIDE or x.shape[3] % STRIDE:
        raise ValueError(f"image shape {x.shape[1:]} incompatible with detector "
                         f"({in_ch} channels, sides divisible by {STRIDE})")
    b, c, h, w = x.shape
    x0 = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    z1, c1 = _conv(x0, params["conv1_w"], params["conv1_b"], 2)
    h1 = np.where(z1 > 0, z1, LEAK * z1)
    z2, c2 = _conv(h1, params["conv2_w"], params["conv2_b"], 2)
    h2 = np.where(z2 > 0, z2, LEAK * z2)
    # both heads read the same input columns
    zc, cc = _conv(h2, params["cls_w"], params["cls_b"], 1)
    wr = params["reg_w"]
    zr = (cc[0] @ wr.reshape(wr.shape[0], -1).T + params["reg_b"])
    zr = zr.reshape(b, zc.shape[2], zc.shape[3], -1).transpose(0, 3, 1, 2)
    num_classes = params["cls_w"].shape[0] // (wr.shape[0] // 5)
    logits = _head_to_anchors(zc, num_classes)
    deltas = _head_to_anchors(zr, 5)
    cache = {"params": params, "z1": z1, "z2": z2, "c1": c1, "c2": c2, "cc": cc,
             "zc_shape": zc.shape, "zr_shape": zr.shape}
    return logits, deltas, cache


def backward(params: dict, cache: dict, grad_logits, grad_deltas) -> dict:
    """Parameter gradients given gradients on ``forward``'s logits and deltas."""
    if cache.get("params") is not params:
        raise ValueError("stale cache: forward was run with different parameters")
    gc = _anchors_to_head(np.asarray(grad_logits, dtype=float), cache["zc_shape"])
    gr = _anchors_to_head(np.asarray(grad_deltas, dtype=float), cache["zr_shape"])
    grads = {}
    grads["cls_w"], grads["cls_b"], gh2 = _conv_backward(gc, params["cls_w"], cache["cc"], 1)
    grads["reg_w"], grads["reg_b"], gh2r = _conv_backward(gr, params["reg_w"], cache["cc"], 1)
    gz2 = (gh2 + gh2r) * np.where(cache["z2"] > 0, 1.0, LEAK)
    grads["conv2_w"], grads["conv2_b"], gh1 = _conv_backward(gz2, params["conv2_w"], cache["c2"], 2)
    gz1 = gh1 * np.where(cache["z1"] > 0, 1.0, LEAK)
    grads["conv1_w"], grads["conv1_b"], _ = _conv_backward(
        gz1, params["conv1_w"], cache["c1"], 2, need_input_grad=False)
    return {k: grads[k] for k in params}


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    step: int = 0
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, opt: OptimState) -> dict:
    """Heavy-ball SGD: ``v = m*v + g``, ``p = p - lr*v``. Returns new params."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient in {name} at step {opt.step}: {bad} bad entries")
    new = {}
    for name, p in params.items():
        v = opt.buffers.get(name)
        v = grads[name].copy() if v is None else opt.momentum * v + grads[name]
        opt.buffers[name] = v
        new[name] = p - opt.lr * v
    opt.step += 1
    return new


def save_checkpoint(path, params: dict, cfg: DetectorConfig, meta: dict | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "detector": asdict(cfg),
        "meta": meta or {},
        "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(record, sort_keys=True))


def load_checkpoint(path, expected: DetectorConfig | None = None):
    """Load ``(params, DetectorConfig, meta)``; shape mismatches are rejected."""
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record.get('version')}")
    cfg = DetectorConfig(**record["detector"])
    if expected is not None:
        mism = [k for k in ("image_size", "num_classes", "num_anchors", "in_channels")
                if getattr(cfg, k) != getattr(expected, k)]
        if mism:
            raise ValueError(f"{path}: checkpoint does not match config in {', '.join(mism)}")
    shapes = cfg.shapes()
    tensors = record["tensors"]
    if set(tensors) != set(shapes):
        raise ValueError(f"{path}: tensor names {sorted(tensors)} do not match detector")
    params = {}
    for name, shape in shapes.items():
        t = tensors[name]
        if tuple(t["shape"]) != shape or len(t["data"]) != math.prod(shape):
            raise ValueError(f"{path}: tensor {name} has shape {t['shape']}, expected {list(shape)}")
        params[name] = np.array(t["data"], dtype=float).reshape(shape)
    return params, cfg, record["meta"]
