"""Axis-aligned box utilities shared by the detector and the segmenter.

Boxes are continuous pixel coordinates ``(x_min, y_min, x_max, y_max)``;
pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``.  Array helpers accept
``(N, 4)`` numpy arrays or torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# largest log-scale delta accepted by decode_deltas (about 1000/16 zoom)
DELTA_SCALE_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))

    def clipped(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, BoundingBox):
        return boxes.as_array()[None]
    if len(boxes) and isinstance(boxes[0], BoundingBox):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU matrix of shape ``(len(a), len(b))``."""
    a, b = as_box_array(a), as_box_array(b)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _center_size(b):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_deltas(boxes, anchors):
    """Regression targets ``(dx/w, dy/h, log w'/w, log h'/h)`` of ``boxes``
    relative to ``anchors``."""
    log = torch.log if torch.is_tensor(boxes) else np.log
    stack = torch.stack if torch.is_tensor(boxes) else np.stack
    gx, gy, gw, gh = _center_size(boxes)
    ax, ay, aw, ah = _center_size(anchors)
    return stack([(gx - ax) / aw, (gy - ay) / ah, log(gw / aw), log(gh / ah)], -1)


def decode_deltas(deltas, anchors):
    if torch.is_tensor(deltas):
        exp, stack = torch.exp, torch.stack
        dw = deltas[..., 2].clamp(max=DELTA_SCALE_CLIP)
        dh = deltas[..., 3].clamp(max=DELTA_SCALE_CLIP)
    else:
        exp, stack = np.exp, np.stack
        dw = np.minimum(deltas[..., 2], DELTA_SCALE_CLIP)
        dh = np.minimum(deltas[..., 3], DELTA_SCALE_CLIP)
    ax, ay, aw, ah = _center_size(anchors)
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * exp(dw)
    h = ah * exp(dh)
    return stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


def clip_boxes(boxes, height: int, width: int):
    if torch.is_tensor(boxes):
        out = boxes.clone()
        out[..., 0::2] = out[..., 0::2].clamp(0, width)
        out[..., 1::2] = out[..., 1::2].clamp(0, height)
        return out
    out = np.array(boxes, dtype=np.float64)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


def valid_boxes(boxes, min_size: float = 1e-6) -> np.ndarray:
    b = as_box_array(boxes)
    return ((b[:, 2] - b[:, 0]) > min_size) & ((b[:, 3] - b[:, 1]) > min_size)


def nms(boxes, scores, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Ties in score are broken by box coordinates, so the kept set does not
    depend on input order.
    """
    b = as_box_array(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(s) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -s))
    iou = box_iou(b, b)
    keep: list[int] = []
    suppressed = np.zeros(len(s), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def box_from_mask(mask: np.ndarray) -> BoundingBox:
    """Tight box of the positive pixels: columns ``[min, max+1)`` and rows alike."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def boxes_to_mask(boxes, height: int, width: int) -> np.ndarray:
    """Union of boxes rasterized by pixel centre."""
    out = np.zeros((height, width), dtype=bool)
    yc = np.arange(height) + 0.5
    xc = np.arange(width) + 0.5
    for x0, y0, x1, y1 in as_box_array(boxes):
        rows = (yc >= y0) & (yc < y1)
        cols = (xc >= x0) & (xc < x1)
        out |= rows[:, None] & cols[None, :]
    return out
