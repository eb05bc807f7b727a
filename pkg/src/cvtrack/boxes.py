"""Box overlap math: plain-float, vectorized, and differentiable variants.

Boxes are (cx, cy, w, h).  The numpy matrix forms feed Hungarian cost
matrices and metric matching; the tensor forms are built from autodiff
primitives so overlap losses backpropagate into predicted boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, maximum, minimum, mul, relu, slice_cols, sub


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self):
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    base = inter / union if union > 0 else 0.0
    if enclose <= 0:
        return base
    return base - (enclose - union) / enclose


def _corners_arr(boxes: np.ndarray):
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (m,4) x (n,4) -> (m,n)."""
    ax0, ay0, ax1, ay1 = (c[:, None] for c in _corners_arr(a))
    bx0, by0, bx1, by1 = _corners_arr(b)
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax0, ay0, ax1, ay1 = (c[:, None] for c in _corners_arr(a))
    bx0, by0, bx1, by1 = _corners_arr(b)
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    enclose = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * (
        np.maximum(ay1, by1) - np.minimum(ay0, by0)
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        base = np.where(union > 0, inter / union, 0.0)
        out = np.where(enclose > 0, base - (enclose - union) / enclose, base)
    return out


def _corners_t(boxes: Tensor):
    cx = slice_cols(boxes, 0, 1)
    cy = slice_cols(boxes, 1, 2)
    w = slice_cols(boxes, 2, 3)
    h = slice_cols(boxes, 3, 4)
    half_w = mul(w, 0.5)
    half_h = mul(h, 0.5)
    return sub(cx, half_w), sub(cy, half_h), cx + half_w, cy + half_h, w, h


def iou_rowwise(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable per-row IoU for two (n,4) tensors -> (n,1)."""
    ax0, ay0, ax1, ay1, aw, ah = _corners_t(a)
    bx0, by0, bx1, by1, bw, bh = _corners_t(b)
    iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)))
    ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)))
    inter = mul(iw, ih)
    union = sub(mul(aw, ah) + mul(bw, bh), inter)
    return div_safe(inter, union)


def giou_rowwise(a: Tensor, b: Tensor) -> Tensor:
    ax0, ay0, ax1, ay1, aw, ah = _corners_t(a)
    bx0, by0, bx1, by1, bw, bh = _corners_t(b)
    iw = relu(sub(minimum(ax1, bx1), maximum(ax0, bx0)))
    ih = relu(sub(minimum(ay1, by1), maximum(ay0, by0)))
    inter = mul(iw, ih)
    union = sub(mul(aw, ah) + mul(bw, bh), inter)
    enclose = mul(
        sub(maximum(ax1, bx1), minimum(ax0, bx0)),
        sub(maximum(ay1, by1), minimum(ay0, by0)),
    )
    return sub(div_safe(inter, union), div_safe(sub(enclose, union), enclose))


def div_safe(num: Tensor, den: Tensor, eps: float = 1e-12) -> Tensor:
    """num/den with the denominator floored away from zero.

    Predicted boxes have strictly positive w/h (sigmoid outputs), so unions
    and enclosing areas are positive; the floor only guards degenerate
    inputs in tests.
    """
    return num / maximum(den, eps)
