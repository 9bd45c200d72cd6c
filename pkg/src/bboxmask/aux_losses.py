"""Heatmap focal loss, CIoU box loss and the five-term training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BBoxMaskError, InvalidBoxError, InvalidShapeError
from .embedding import LossResult


class NonFiniteLossError(BBoxMaskError, ArithmeticError):
    pass


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    gamma: float = 4.0
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be >= 0")
        if not 0 < self.clamp_eps < 0.5:
            raise ValueError("clamp_eps must lie in (0, 0.5)")


def heatmap_focal_loss(pred, target, params: FocalParams = FocalParams()) -> LossResult:
    """Penalty-reduced pixel focal loss for Gaussian heatmap targets.

    Pixels with ``target == 1`` are positives; every other pixel is a negative
    down-weighted by ``(1 - target) ** gamma``. The sum is divided by the
    number of positives (at least 1). Predictions are clamped to
    ``[clamp_eps, 1 - clamp_eps]`` and the gradient is zero where the clamp is
    active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidShapeError(f"pred {pred.shape} and target {target.shape} differ")
    a, eps = params.alpha, params.clamp_eps
    p = np.clip(pred, eps, 1.0 - eps)
    pos = target == 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = np.where(pos, 0.0, (1.0 - target) ** params.gamma)

    log_p, log_q = np.log(p), np.log1p(-p)
    pos_term = (1.0 - p) ** a * log_p
    neg_term = neg_w * p**a * log_q
    value = -(pos_term[pos].sum() + neg_term[~pos].sum()) / n_pos

    d_pos = -a * (1.0 - p) ** (a - 1) * log_p + (1.0 - p) ** a / p
    d_neg = neg_w * (a * p ** (a - 1) * log_q - p**a / (1.0 - p))
    grad = -np.where(pos, d_pos, d_neg) / n_pos
    grad[(pred < eps) | (pred > 1.0 - eps)] = 0.0
    return LossResult(float(value), grad, {"focal": float(value)})


def _ltrb_box(ltrb, anchor) -> tuple[float, float, float, float]:
    l, t, r, b = (float(v) for v in ltrb)
    ax, ay = anchor
    if l + r <= 0 or t + b <= 0:
        raise InvalidBoxError(f"ltrb {(l, t, r, b)} gives a non-positive width or height")
    return ax - l, ay - t, ax + r, ay + b


def ciou_loss(pred_ltrb, target_ltrb, anchor_point=(0.0, 0.0), alpha_stop_grad: bool = False) -> LossResult:
    """Complete-IoU loss between two boxes given as distances from a shared anchor.

    ``1 - IoU + rho^2 / c^2 + alpha * v`` with ``v`` the arctan aspect-ratio
    gap and ``alpha = v / (1 - IoU + v)``. The gradient (w.r.t. ``pred_ltrb``)
    is exact by default; ``alpha_stop_grad=True`` treats ``alpha`` as a
    constant, as is customary during training.
    """
    x1, y1, x2, y2 = _ltrb_box(pred_ltrb, anchor_point)
    gx1, gy1, gx2, gy2 = _ltrb_box(target_ltrb, anchor_point)
    w, h = x2 - x1, y2 - y1
    gw, gh = gx2 - gx1, gy2 - gy1

    # Derivatives are carried w.r.t. the pred corners (x1, y1, x2, y2).
    iw = min(x2, gx2) - max(x1, gx1)
    ih = min(y2, gy2) - max(y1, gy1)
    if iw > 0 and ih > 0:
        inter = iw * ih
        d_iw = np.array([-float(x1 > gx1), 0.0, float(x2 < gx2), 0.0])
        d_ih = np.array([0.0, -float(y1 > gy1), 0.0, float(y2 < gy2)])
        d_inter = d_iw * ih + d_ih * iw
    else:
        inter, d_inter = 0.0, np.zeros(4)
    union = w * h + gw * gh - inter
    d_area = np.array([-h, -w, h, w])
    d_union = d_area - d_inter
    iou = inter / union
    d_iou = (d_inter * union - inter * d_union) / union**2

    dx = (x1 + x2 - gx1 - gx2) / 2.0
    dy = (y1 + y2 - gy1 - gy2) / 2.0
    rho2 = dx * dx + dy * dy
    d_rho2 = np.array([dx, dy, dx, dy])
    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    c2 = cw * cw + ch * ch
    d_cw = np.array([-float(x1 <= gx1), 0.0, float(x2 >= gx2), 0.0])
    d_ch = np.array([0.0, -float(y1 <= gy1), 0.0, float(y2 >= gy2)])
    d_c2 = 2 * cw * d_cw + 2 * ch * d_ch
    d_dist = (d_rho2 * c2 - rho2 * d_c2) / c2**2

    gap = math.atan(gw / gh) - math.atan(w / h)
    v = 4.0 / math.pi**2 * gap * gap
    d_atan = np.array([-h, w, h, -w]) / (w * w + h * h)  # d atan(w/h) / d corners
    d_v = -8.0 / math.pi**2 * gap * d_atan
    q = 1.0 - iou + v
    alpha = v / q if q > 0 else 0.0
    d_alpha = np.zeros(4) if (alpha_stop_grad or q <= 0) else (d_v * q - v * (d_v - d_iou)) / q**2

    value = 1.0 - iou + rho2 / c2 + alpha * v
    d_corners = -d_iou + d_dist + alpha * d_v + v * d_alpha
    # x1 = ax - l, y1 = ay - t, x2 = ax + r, y2 = ay + b
    grad = d_corners * np.array([-1.0, -1.0, 1.0, 1.0])
    return LossResult(float(value), grad, {"iou": float(iou), "ciou": float(value)})


def masked_bbox_loss(pred_map, target_map, mask) -> LossResult:
    """Mean CIoU over pixels with ``mask == 1``; each pixel is its own anchor."""
    pred = np.asarray(pred_map, dtype=np.float64)
    target = np.asarray(target_map, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[0] != 4 or m.shape != (1,) + pred.shape[1:]:
        raise InvalidShapeError(f"inconsistent shapes pred {pred.shape}, target {target.shape}, mask {m.shape}")
    grad = np.zeros_like(pred)
    ys, xs = np.nonzero(m[0] == 1)
    if len(ys) == 0:
        return LossResult(0.0, grad, {"bbox": 0.0})
    total = 0.0
    for y, x in zip(ys, xs):
        res = ciou_loss(pred[:, y, x], target[:, y, x], (float(x), float(y)))
        total += res.value
        grad[:, y, x] = res.grad
    n = len(ys)
    return LossResult(total / n, grad / n, {"bbox": total / n})


TERMS = ("kpt", "center", "buk", "bbox", "emb")


def total_loss(parts: dict[str, LossResult], weights: dict[str, float] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted sum of the five training terms (unit weights by default).

    ``parts`` maps term names from :data:`TERMS` to results; missing terms
    count as zero. Returns the total and the weighted gradients keyed by
    term, since each term's gradient lives on a different prediction map.
    """
    weights = weights or {}
    unknown = (parts.keys() | weights.keys()) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss term(s) {sorted(unknown)}")
    total = 0.0
    grads = {}
    for name in TERMS:
        if name not in parts:
            continue
        res = parts[name]
        if not math.isfinite(res.value) or not np.all(np.isfinite(res.grad)):
            raise NonFiniteLossError(f"loss term {name!r} is not finite")
        w = weights.get(name, 1.0)
        total += w * res.value
        grads[name] = w * res.grad
    return total, grads
