"""Box regression head, losses, and IoU metrics.

Boxes use normalized (cx, cy, w, h) in [0, 1]; the head's final sigmoid
guarantees that for predictions.  The loss deep-supervises every decoder
stage with weighted L1 + GIoU terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

AREA_EPS = 1e-12


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    def tensors(self, prefix: str = "head") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
                f"{prefix}.w3": self.w3, f"{prefix}.b3": self.b3}


def init_head(c: int, rng: np.random.Generator) -> HeadParams:
    return HeadParams(
        w1=T.param(T.xavier_uniform((c, c), rng)), b1=T.param(np.zeros(c)),
        w2=T.param(T.xavier_uniform((c, c), rng)), b2=T.param(np.zeros(c)),
        w3=T.param(T.xavier_uniform((c, 4), rng)), b3=T.param(np.zeros(4)),
    )


def predict_box(f_vq: Tensor, head: HeadParams) -> Tensor:
    """Query vector [B, 1, C] -> sigmoid-squashed (cx, cy, w, h) [B, 4]."""
    x = T.reshape(f_vq, (f_vq.shape[0], f_vq.shape[-1]))
    x = T.relu(T.linear(x, head.w1, head.b1))
    x = T.relu(T.linear(x, head.w2, head.b2))
    return T.sigmoid(T.linear(x, head.w3, head.b3))


def to_corners(boxes: Tensor) -> Tensor:
    """(cx, cy, w, h) -> (x0, y0, x1, y1), clipped to the unit square."""
    cx = T.narrow(boxes, boxes.ndim - 1, 0, 1)
    cy = T.narrow(boxes, boxes.ndim - 1, 1, 1)
    half_w = T.scale(T.narrow(boxes, boxes.ndim - 1, 2, 1), 0.5)
    half_h = T.scale(T.narrow(boxes, boxes.ndim - 1, 3, 1), 0.5)
    return T.concat([
        T.clamp(T.sub(cx, half_w), 0.0, 1.0),
        T.clamp(T.sub(cy, half_h), 0.0, 1.0),
        T.clamp(T.add(cx, half_w), 0.0, 1.0),
        T.clamp(T.add(cy, half_h), 0.0, 1.0),
    ], axis=boxes.ndim - 1)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over the 4 box components (and any batch)."""
    return T.mean_(T.abs_(T.sub(pred, target)))


def _areas_and_overlap(a: Tensor, b: Tensor):
    def parts(t):
        return [T.narrow(t, t.ndim - 1, i, 1) for i in range(4)]

    ax0, ay0, ax1, ay1 = parts(a)
    bx0, by0, bx1, by1 = parts(b)
    zero = T.zeros(ax0.shape)
    area_a = T.hadamard(T.maximum(T.sub(ax1, ax0), zero), T.maximum(T.sub(ay1, ay0), zero))
    area_b = T.hadamard(T.maximum(T.sub(bx1, bx0), zero), T.maximum(T.sub(by1, by0), zero))
    iw = T.maximum(T.sub(T.minimum(ax1, bx1), T.maximum(ax0, bx0)), zero)
    ih = T.maximum(T.sub(T.minimum(ay1, by1), T.maximum(ay0, by0)), zero)
    inter = T.hadamard(iw, ih)
    hull_w = T.sub(T.maximum(ax1, bx1), T.minimum(ax0, bx0))
    hull_h = T.sub(T.maximum(ay1, by1), T.minimum(ay0, by0))
    hull = T.hadamard(hull_w, hull_h)
    return area_a, area_b, inter, hull


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU in (-1, 1] for corner-form boxes [.., 4].

    Coincident degenerate boxes (zero enclosing area) count as identical,
    giou = 1; that branch carries no gradient.
    """
    area_a, area_b, inter, hull = _areas_and_overlap(a, b)
    union = T.sub(T.add(area_a, area_b), inter)
    iou_t = T.div(inter, T.clamp_min(union, AREA_EPS))
    penalty = T.div(T.sub(hull, union), T.clamp_min(hull, AREA_EPS))
    out = T.sub(iou_t, penalty)
    degenerate = (hull.data <= 0.0).astype(np.float64)
    if degenerate.any():
        keep = T.constant(1.0 - degenerate)
        out = T.add(T.hadamard(out, keep), T.constant(degenerate))
    return out


def giou_loss(pred_cxcywh: Tensor, target_cxcywh: Tensor) -> Tensor:
    """Mean of 1 - giou after corner conversion."""
    g = giou(to_corners(pred_cxcywh), to_corners(target_cxcywh))
    return T.mean_(T.add_const(T.scale(g, -1.0), 1.0))


def total_loss(stage_boxes: list[Tensor], target: Tensor, expected_stages: int,
               lambda_l1: float = 5.0, lambda_giou: float = 2.0) -> Tensor:
    """Deep-supervised objective: sum over stages of weighted L1 + GIoU."""
    if len(stage_boxes) != expected_stages:
        raise ConfigError(f"{len(stage_boxes)} stage predictions, expected {expected_stages}")
    total = None
    for pred in stage_boxes:
        term = T.add(T.scale(l1_loss(pred, target), lambda_l1),
                     T.scale(giou_loss(pred, target), lambda_giou))
        total = term if total is None else T.add(total, term)
    return total


def iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain IoU on corner-form numpy boxes [.., 4], for metrics."""
    ix0 = np.maximum(a[..., 0], b[..., 0])
    iy0 = np.maximum(a[..., 1], b[..., 1])
    ix1 = np.minimum(a[..., 2], b[..., 2])
    iy1 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    return inter / np.maximum(union, AREA_EPS)


def corners_np(cxcywh: np.ndarray) -> np.ndarray:
    cx, cy, w, h = [cxcywh[..., i] for i in range(4)]
    return np.clip(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1), 0.0, 1.0)


def accuracy_at_iou(preds_cxcywh: np.ndarray, gts_cxcywh: np.ndarray, thresh: float = 0.5) -> float:
    """Fraction of predictions whose IoU with the ground truth exceeds ``thresh``."""
    preds_cxcywh = np.asarray(preds_cxcywh, dtype=np.float64)
    gts_cxcywh = np.asarray(gts_cxcywh, dtype=np.float64)
    if preds_cxcywh.size == 0:
        raise DataError("accuracy_at_iou: empty evaluation set")
    ious = iou_np(corners_np(preds_cxcywh), corners_np(gts_cxcywh))
    return float((ious > thresh).mean())
