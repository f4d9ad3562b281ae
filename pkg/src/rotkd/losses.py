"""Detection and distillation losses with analytic gradients.

Every loss takes arrays with arbitrary leading (anchor) dimensions and returns
``(loss, grad)``: ``loss`` holds one value per anchor and ``grad`` matches the
shape of the student input. :func:`combined_loss` reduces these over a batch
of anchors into the weighted total used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import IGNORE
from .geometry import LOG_DELTA_CLAMP, Gaussian2D, decode_boxes

KD_DIRECTIONS = ("as-printed", "classic")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")


@dataclass(frozen=True)
class DistillConfig:
    """Weights and hyperparameters of the four-term student objective."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    t_cls: float = 8.0
    t_reg: float = 10.0
    kd_direction: str = "as-printed"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    iou_pos: float = 0.5
    iou_neg: float = 0.4

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.t_cls < 1 or self.t_reg < 1:
            raise ValueError("temperatures must be >= 1")
        if self.kd_direction not in KD_DIRECTIONS:
            raise ValueError(f"kd_direction must be one of {KD_DIRECTIONS}")
        if self.iou_neg > self.iou_pos:
            raise ValueError("iou_neg must not exceed iou_pos")
        FocalParams(self.focal_gamma, self.focal_alpha)

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.focal_gamma, self.focal_alpha)


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_kd_cls: float
    l_kd_reg: float
    l_all: float
    grad_logits: np.ndarray
    grad_deltas: np.ndarray
    num_pos: int

    def terms(self) -> dict:
        return {
            "l_cls": self.l_cls, "l_reg": self.l_reg, "l_kd_cls": self.l_kd_cls,
            "l_kd_reg": self.l_kd_reg, "l_all": self.l_all,
        }


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _log_softmax(u: np.ndarray) -> np.ndarray:
    u = u - u.max(axis=-1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=-1, keepdims=True))


def tempered_softmax(z, T: float = 1.0) -> np.ndarray:
    """Softmax of ``z / T`` over the last axis."""
    return np.exp(_log_softmax(np.asarray(z, dtype=float) / T))


def kd_cls_loss(z_s, z_t, T: float = 1.0, direction: str = "as-printed"):
    """KL divergence between tempered class distributions, scaled by ``T**2``.

    ``as-printed`` computes ``KL(p_s || p_t)`` (student first), ``classic``
    computes ``KL(p_t || p_s)``. The teacher logits are constants.
    """
    z_s = np.asarray(z_s, dtype=float)
    z_t = np.asarray(z_t, dtype=float)
    if z_s.shape != z_t.shape:
        raise ValueError(f"logit shapes differ: {z_s.shape} vs {z_t.shape}")
    if direction not in KD_DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    log_ps = _log_softmax(z_s / T)
    log_pt = _log_softmax(z_t / T)
    ps = np.exp(log_ps)
    if direction == "as-printed":
        q = log_ps - log_pt
        kl = (ps * q).sum(axis=-1)
        grad = T * ps * (q - kl[..., None])
    else:
        pt = np.exp(log_pt)
        kl = (pt * (log_pt - log_ps)).sum(axis=-1)
        grad = T * (ps - pt)
    return T * T * kl, grad


def _softplus(x):
    return np.logaddexp(0.0, x)


def focal_loss(logits, targets, gamma: float = 2.0, alpha: float = 0.25):
    """Sigmoid focal loss summed over classes.

    ``targets`` is a 0/1 array shaped like ``logits``. Working from logits keeps
    ``log p`` finite for saturated scores, so no probability clamp is needed.
    """
    x = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    if x.shape != t.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {x.shape}")
    pos = t > 0.5
    # log p_t and p_t, where p_t is the probability of the labelled outcome
    log_pt = np.where(pos, -_softplus(-x), -_softplus(x))
    pt = np.exp(log_pt)
    one_m = 1.0 - pt
    a = np.where(pos, alpha, 1.0 - alpha)
    mod = one_m ** gamma
    loss = -a * mod * log_pt
    dpt = gamma * mod * pt * log_pt - mod * one_m
    grad = np.where(pos, 1.0, -1.0) * a * dpt
    return loss.sum(axis=-1), grad


def focal_loss_probs(p, targets, gamma: float = 2.0, alpha: float = 0.25,
                     eps: float = 1e-12):
    """:func:`focal_loss` for per-class sigmoid probabilities.

    The gradient is still taken with respect to the underlying logits.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    p = np.clip(p, eps, 1.0 - eps)
    return focal_loss(np.log(p) - np.log1p(-p), targets, gamma, alpha)


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def kd_reg_loss(x_s, x_t, T_reg: float = 1.0):
    """Soft regression loss between student and teacher box deltas.

    The difference is divided by ``T_reg`` before the smooth-L1 shape
    (quadratic inside unit error, linear outside) and the five components are
    averaged.
    """
    x_s = np.asarray(x_s, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    d = (x_t - x_s) / T_reg
    ad = np.abs(d)
    quad = ad <= 1.0
    per = np.where(quad, 0.5 * d * d, ad - 0.5)
    slope = np.where(quad, d, np.sign(d))
    n = x_s.shape[-1]
    return per.mean(axis=-1), -slope / (T_reg * n)


def gaussian_kld(g_t: Gaussian2D, g_s: Gaussian2D) -> float:
    """``KL(N(mu_t, sigma_t) || N(mu_s, sigma_s))`` for 2-D Gaussians."""
    for g in (g_t, g_s):
        s = np.asarray(g.sigma, dtype=float)
        if s.shape != (2, 2) or not np.allclose(s, s.T, atol=1e-12, rtol=0):
            raise ValueError("sigma must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(s).min() <= 0:
            raise ValueError("sigma must be positive definite")
    inv_s = np.linalg.inv(g_s.sigma)
    d = np.asarray(g_s.mu, dtype=float) - np.asarray(g_t.mu, dtype=float)
    _, logdet_s = np.linalg.slogdet(g_s.sigma)
    _, logdet_t = np.linalg.slogdet(g_t.sigma)
    return 0.5 * float(np.trace(inv_s @ g_t.sigma) + d @ inv_s @ d - 2.0 + logdet_s - logdet_t)


def _kld_boxes(pred: np.ndarray, gt: np.ndarray):
    """KL divergence from the gt Gaussian to the pred Gaussian, and its gradient
    with respect to the pred box parameters ``(cx, cy, w, h, theta)``."""
    c, s = np.cos(pred[..., 4]), np.sin(pred[..., 4])
    a = pred[..., 2] ** 2 / 4.0
    b = pred[..., 3] ** 2 / 4.0

    ct, st = np.cos(gt[..., 4]), np.sin(gt[..., 4])
    at = gt[..., 2] ** 2 / 4.0
    bt = gt[..., 3] ** 2 / 4.0
    # M = sigma_t + delta delta^T, delta = mu_s - mu_t
    dx = pred[..., 0] - gt[..., 0]
    dy = pred[..., 1] - gt[..., 1]
    mxx = at * ct * ct + bt * st * st + dx * dx
    myy = at * st * st + bt * ct * ct + dy * dy
    mxy = (at - bt) * ct * st + dx * dy
    # N = R^T M R in the pred box frame
    n11 = c * c * mxx + 2 * c * s * mxy + s * s * myy
    n22 = s * s * mxx - 2 * c * s * mxy + c * c * myy
    n12 = c * s * (myy - mxx) + (c * c - s * s) * mxy

    kld = 0.5 * (n11 / a + n22 / b - 2.0 + np.log(a * b) - np.log(at * bt))

    # sigma_s^{-1} delta
    u = c * dx + s * dy
    v = -s * dx + c * dy
    gcx = c * u / a - s * v / b
    gcy = s * u / a + c * v / b
    g_a = 0.5 * (1.0 / a - n11 / (a * a))
    g_b = 0.5 * (1.0 / b - n22 / (b * b))
    gw = g_a * pred[..., 2] / 2.0
    gh = g_b * pred[..., 3] / 2.0
    gt_theta = n12 * (1.0 / a - 1.0 / b)
    grad = np.stack([gcx, gcy, gw, gh, gt_theta], axis=-1)
    return kld, grad


def gaussian_kld_reg_loss(pred, gt):
    """Gaussian-KLD box loss ``1 - 1 / (1 + log(1 + D))``.

    ``D`` is the KL divergence from the ground-truth Gaussian to the predicted
    one. Returns the loss and its gradient with respect to the predicted box
    fields.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    kld, dk = _kld_boxes(pred, gt)
    kld = np.maximum(kld, 0.0)
    denom = 1.0 + np.log1p(kld)
    loss = 1.0 - 1.0 / denom
    dl = 1.0 / (denom * denom * (1.0 + kld))
    return loss, dl[..., None] * dk


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------

def one_hot_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((len(labels), num_classes))
    pos = labels >= 0
    out[np.nonzero(pos)[0], labels[pos]] = 1.0
    return out


def combined_loss(
    student_logits: np.ndarray,
    student_deltas: np.ndarray,
    labels: np.ndarray,
    gt_boxes: np.ndarray,
    anchors: np.ndarray,
    cfg: DistillConfig,
    teacher_logits: np.ndarray | None = None,
    teacher_deltas: np.ndarray | None = None,
) -> LossBreakdown:
    """Weighted sum of the hard (focal, Gaussian-KLD) and soft (KD) losses.

    All per-anchor arrays are flat over the batch: ``(N, C)`` logits, ``(N, 5)``
    deltas, ``(N,)`` labels (class index, ``NEGATIVE`` or ``IGNORE``),
    ``(N, 5)`` matched ground-truth boxes (rows of non-positives unused) and
    ``(N, 5)`` anchors. Without teacher outputs, or with a zero weight, a KD
    term is not evaluated and reported as zero.

    Normalization: focal loss is summed over non-ignored anchors and divided by
    the positive count; the regression terms are averaged over positives; the
    classification KD term is averaged over all anchors.
    """
    logits = np.asarray(student_logits, dtype=float)
    deltas = np.asarray(student_deltas, dtype=float)
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    pos = labels >= 0
    pos_idx = np.nonzero(pos)[0]
    num_pos = len(pos_idx)
    norm = float(max(num_pos, 1))

    valid = labels != IGNORE
    fl, fl_grad = focal_loss(logits, one_hot_targets(labels, num_classes),
                             cfg.focal_gamma, cfg.focal_alpha)
    l_cls = float(fl[valid].sum()) / norm
    g_cls = np.where(valid[:, None], fl_grad, 0.0) / norm

    g_reg = np.zeros_like(deltas)
    l_reg = 0.0
    if num_pos:
        a = np.asarray(anchors, dtype=float)[pos_idx]
        d = deltas[pos_idx]
        pred = decode_boxes(a, d)
        lr, g_box = gaussian_kld_reg_loss(pred, np.asarray(gt_boxes, dtype=float)[pos_idx])
        l_reg = float(lr.sum()) / num_pos
        # chain rule through decode
        g_d = np.empty_like(g_box)
        g_d[:, 0] = g_box[:, 0] * a[:, 2]
        g_d[:, 1] = g_box[:, 1] * a[:, 3]
        g_d[:, 2] = np.where(np.abs(d[:, 2]) < LOG_DELTA_CLAMP, g_box[:, 2] * pred[:, 2], 0.0)
        g_d[:, 3] = np.where(np.abs(d[:, 3]) < LOG_DELTA_CLAMP, g_box[:, 3] * pred[:, 3], 0.0)
        g_d[:, 4] = g_box[:, 4]
        g_reg[pos_idx] = g_d / num_pos

    l_kd_cls = 0.0
    g_kd_cls = np.zeros_like(logits)
    if teacher_logits is not None and cfg.lambda3 > 0:
        kc, kc_grad = kd_cls_loss(logits, teacher_logits, cfg.t_cls, cfg.kd_direction)
        l_kd_cls = float(kc.sum()) / n
        g_kd_cls = kc_grad / n

    l_kd_reg = 0.0
    g_kd_reg = np.zeros_like(deltas)
    if teacher_deltas is not None and num_pos and cfg.lambda4 > 0:
        kr, kr_grad = kd_reg_loss(deltas[pos_idx], np.asarray(teacher_deltas, dtype=float)[pos_idx],
                                  cfg.t_reg)
        l_kd_reg = float(kr.sum()) / num_pos
        g_kd_reg[pos_idx] = kr_grad / num_pos

    l_all = (cfg.lambda1 * l_cls + cfg.lambda2 * l_reg
             + cfg.lambda3 * l_kd_cls + cfg.lambda4 * l_kd_reg)
    grad_logits = cfg.lambda1 * g_cls + cfg.lambda3 * g_kd_cls
    grad_deltas = cfg.lambda2 * g_reg + cfg.lambda4 * g_kd_reg
    return LossBreakdown(l_cls, l_reg, l_kd_cls, l_kd_reg, l_all,
                         grad_logits, grad_deltas, num_pos)
