"""Axis-aligned box arithmetic: overlap, greedy suppression and region expansion.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates, with area ``(x2 - x1) * (y2 - y1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}: need x2 > x1 and y2 > y1")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "BBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "BBox":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class ImageExtent:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image extent must be positive, got {self.width}x{self.height}")

    def contains(self, box: BBox, tol: float = 1e-6) -> bool:
        return (box.x1 >= -tol and box.y1 >= -tol
                and box.x2 <= self.width + tol and box.y2 <= self.height + tol)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices in descending score order.

    Equal scores keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return np.zeros(0, dtype=int)
    order = np.argsort(-scores, kind="stable")
    boxes = np.asarray(boxes, dtype=float)[order]
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=int)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy descending-score suppression.

    Survivors are returned sorted by score; no two survivors overlap by more
    than ``iou_threshold``.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    if not boxes:
        return []
    keep = nms_indices(boxes_to_array([b.box for b in boxes]),
                       np.array([b.score for b in boxes]), iou_threshold)
    return [boxes[i] for i in keep]


def expand_box(b: BBox, factor: float, extent: ImageExtent) -> BBox:
    """Scale width and height by ``factor`` around the center, then clip to the image."""
    if factor < 1.0:
        raise ValueError(f"expansion factor must be >= 1, got {factor}")
    # grow each side by half the extra size; exact identity at factor 1
    dx, dy = 0.5 * (factor - 1.0) * b.width, 0.5 * (factor - 1.0) * b.height
    return BBox(max(0.0, b.x1 - dx), max(0.0, b.y1 - dy),
                min(float(extent.width), b.x2 + dx), min(float(extent.height), b.y2 + dy))


def clip_box(b: BBox, extent: ImageExtent) -> BBox:
    return BBox(max(0.0, b.x1), max(0.0, b.y1),
                min(float(extent.width), b.x2), min(float(extent.height), b.y2))
