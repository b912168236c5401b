"""Box algebra: center-form boxes, the glimpse/regression delta codec, IoU, clipping.

Boxes are stored as (cx, cy, w, h) in continuous pixel coordinates. Corner form
(x1, y1, x2, y2) is a view with ``w = x2 - x1``. Every scalar function has an
array twin operating on ``(N, 4)`` float arrays; the training and detection
paths use the array versions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBoxError


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"box needs positive width/height, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GlimpseDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dw, self.dh)):
            raise InvalidBoxError(f"non-finite glimpse delta {self}")

    @classmethod
    def from_array(cls, a) -> "GlimpseDelta":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


ZERO_DELTA = GlimpseDelta(0.0, 0.0, 0.0, 0.0)


def _check_positive(boxes: np.ndarray, what: str) -> None:
    if boxes.size and not (np.all(boxes[..., 2] > 0) and np.all(boxes[..., 3] > 0)):
        raise InvalidBoxError(f"{what} has non-positive width/height")


# -- array versions ---------------------------------------------------------

def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Deltas of ``boxes`` relative to ``anchors``; both ``(..., 4)`` center form."""
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    _check_positive(boxes, "box")
    _check_positive(anchors, "anchor")
    out = np.empty(np.broadcast(boxes, anchors).shape)
    out[..., 0] = (boxes[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (boxes[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(boxes[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(boxes[..., 3] / anchors[..., 3])
    return out


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    _check_positive(anchors, "anchor")
    out = np.empty(np.broadcast(deltas, anchors).shape)
    out[..., 0] = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(deltas[..., 2])
    out[..., 3] = anchors[..., 3] * np.exp(deltas[..., 3])
    return out


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    return np.concatenate(
        [(corners[..., :2] + corners[..., 2:]) / 2.0, corners[..., 2:] - corners[..., :2]], axis=-1
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` center-form boxes."""
    ca = to_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cb = to_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    ix = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    iy = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``(N, 4)`` arrays."""
    ca, cb = to_corners(a), to_corners(b)
    ix = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    iy = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1]) + (cb[..., 2] - cb[..., 0]) * (
        cb[..., 3] - cb[..., 1]
    ) - inter
    return inter / union


def _clip_axis(lo, hi, extent):
    c_lo = np.maximum(lo, 0.0)
    c_hi = np.minimum(hi, extent)
    bad = (c_hi - c_lo) < 1.0
    if np.any(bad):
        mid = np.clip((c_lo + c_hi) / 2.0, 0.5, extent - 0.5)
        c_lo = np.where(bad, mid - 0.5, c_lo)
        c_hi = np.where(bad, mid + 0.5, c_hi)
    return c_lo, c_hi


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Intersect boxes with the image; sides shorter than one pixel become 1 pixel wide."""
    c = to_corners(boxes)
    x1, x2 = _clip_axis(c[..., 0], c[..., 2], float(width))
    y1, y2 = _clip_axis(c[..., 1], c[..., 3], float(height))
    return from_corners(np.stack([x1, y1, x2, y2], axis=-1))


# -- scalar API -------------------------------------------------------------

def encode_glimpse(box: BoundingBox, anchor: BoundingBox) -> GlimpseDelta:
    """Scale-invariant shift of ``box`` relative to ``anchor``."""
    return GlimpseDelta.from_array(encode_boxes(box.as_array(), anchor.as_array()))


def decode_glimpse(delta: GlimpseDelta, anchor: BoundingBox) -> BoundingBox:
    return BoundingBox.from_array(decode_boxes(delta.as_array(), anchor.as_array()))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_pairs(a.as_array(), b.as_array()))


def clip_box(box: BoundingBox, width: float, height: float) -> BoundingBox:
    if not (width > 0 and height > 0):
        raise InvalidBoxError(f"image extent must be positive, got {width}x{height}")
    return BoundingBox.from_array(clip_boxes(box.as_array(), width, height))
