"""Axis-aligned boxes in normalized (cx, cy, w, h) coordinates and overlap losses.

Tensor cores operate on (..., 4) torch tensors and stay differentiable; the
scalar wrappers take BoxCXCYWH dataclasses and return floats.  All division
denominators (union, enclosure) are clamped to AREA_EPS so degenerate boxes
stay finite.
"""

from dataclasses import dataclass

import numpy as np
import torch

# tolerance on the unit-frame containment check of a valid box
BOUNDS_EPS = 1e-6
# floor for union/enclosure areas before division
AREA_EPS = 1e-9


@dataclass(frozen=True)
class BoxCXCYWH:
    """Box as center (cx, cy) and size (w, h), all in units of image extent.

    Sides must be positive and the box must fit in the unit frame up to
    BOUNDS_EPS.  Construction validates; use clamp_box to coerce raw
    model outputs into a valid box first.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not all(np.isfinite([self.cx, self.cy, self.w, self.h])):
            raise ValueError(f"non-finite box {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        eps = BOUNDS_EPS
        if (
            self.cx - self.w / 2 < -eps
            or self.cx + self.w / 2 > 1 + eps
            or self.cy - self.h / 2 < -eps
            or self.cy + self.h / 2 > 1 + eps
        ):
            raise ValueError(f"box escapes the unit frame: {self}")

    def to_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def corners(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def flipped(self):
        """Mirror across the vertical center line of the frame."""
        return BoxCXCYWH(1.0 - self.cx, self.cy, self.w, self.h)


def clamp_box(cx, cy, w, h):
    """Coerce raw (cx, cy, w, h) values into a valid BoxCXCYWH.

    Corners are clipped to the unit frame; sides get a small positive floor so
    fully-degenerate outputs still construct.
    """
    arr = clamp_boxes_array(np.array([[cx, cy, w, h]], dtype=np.float64))[0]
    return BoxCXCYWH(*arr.tolist())


def clamp_boxes_array(boxes):
    """Vectorized clamp of an (n, 4) cxcywh array into the unit frame.

    Rows that already describe a valid box pass through bitwise unchanged;
    rebuilding every row from clipped corners would perturb them by an ulp.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    x1 = boxes[:, 0] - boxes[:, 2] / 2
    y1 = boxes[:, 1] - boxes[:, 3] / 2
    x2 = boxes[:, 0] + boxes[:, 2] / 2
    y2 = boxes[:, 1] + boxes[:, 3] / 2
    valid = (
        (boxes[:, 2] > 0)
        & (boxes[:, 3] > 0)
        & (x1 >= 0.0)
        & (y1 >= 0.0)
        & (x2 <= 1.0)
        & (y2 <= 1.0)
    )
    x1, x2 = np.clip(x1, 0.0, 1.0), np.clip(x2, 0.0, 1.0)
    y1, y2 = np.clip(y1, 0.0, 1.0), np.clip(y2, 0.0, 1.0)
    w = np.maximum(x2 - x1, BOUNDS_EPS)
    h = np.maximum(y2 - y1, BOUNDS_EPS)
    rebuilt = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, w, h], axis=1)
    return np.where(valid[:, None], boxes, rebuilt)


def flip_boxes_array(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return boxes


def box_cxcywh_to_xyxy(t):
    cx, cy, w, h = t.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def iou_matrix(a, b):
    """Pairwise IoU of cxcywh tensors a (n, 4) and b (m, 4) -> (n, m)."""
    ax = box_cxcywh_to_xyxy(a)
    bx = box_cxcywh_to_xyxy(b)
    area_a = (ax[:, 2] - ax[:, 0]) * (ax[:, 3] - ax[:, 1])
    area_b = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    lt = torch.maximum(ax[:, None, :2], bx[None, :, :2])
    rb = torch.minimum(ax[:, None, 2:], bx[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=AREA_EPS)


def giou_matrix(a, b):
    """Pairwise generalized IoU: iou - (enclosure - union) / enclosure."""
    ax = box_cxcywh_to_xyxy(a)
    bx = box_cxcywh_to_xyxy(b)
    area_a = (ax[:, 2] - ax[:, 0]) * (ax[:, 3] - ax[:, 1])
    area_b = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    lt = torch.maximum(ax[:, None, :2], bx[None, :, :2])
    rb = torch.minimum(ax[:, None, 2:], bx[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union.clamp(min=AREA_EPS)
    lt_enc = torch.minimum(ax[:, None, :2], bx[None, :, :2])
    rb_enc = torch.maximum(ax[:, None, 2:], bx[None, :, 2:])
    wh_enc = (rb_enc - lt_enc).clamp(min=0)
    enclosure = wh_enc[..., 0] * wh_enc[..., 1]
    return iou - (enclosure - union) / enclosure.clamp(min=AREA_EPS)


def l1_matrix(a, b):
    """Pairwise L1 distance between cxcywh tensors -> (n, m)."""
    return torch.cdist(a, b, p=1)


def _pair_scalar(fn, a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    ta = torch.from_numpy(a.to_array()).reshape(1, 4)
    tb = torch.from_numpy(b.to_array()).reshape(1, 4)
    return float(fn(ta, tb)[0, 0])


def iou(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """Intersection over union, in [0, 1]."""
    return _pair_scalar(iou_matrix, a, b)


def giou(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """Generalized IoU, in [-1, 1]; equals iou(a, b) iff the enclosure adds nothing."""
    return _pair_scalar(giou_matrix, a, b)


def l1_box(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    """Sum of absolute differences of the four box coordinates."""
    return _pair_scalar(l1_matrix, a, b)
