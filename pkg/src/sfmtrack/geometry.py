"""Axis-aligned box arithmetic in continuous pixel coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    """Box given by its top-left corner and its extent, all in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive extent, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def scaled(self, k: float) -> "BBox":
        return BBox(self.x * k, self.y * k, self.w * k, self.h * k)


def area(b: BBox) -> float:
    return b.w * b.h


def iou(a: BBox, b: BBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def center(b: BBox) -> Point:
    return Point(b.x + b.w / 2.0, b.y + b.h / 2.0)


def center_error(a: BBox, b: BBox) -> float:
    ca, cb = center(a), center(b)
    return math.hypot(ca.x - cb.x, ca.y - cb.y)


def relative_speed(prev: BBox, cur: BBox) -> float:
    """Center displacement normalised by the root of the mean area of both boxes."""
    return center_error(prev, cur) / math.sqrt((prev.area + cur.area) / 2.0)
