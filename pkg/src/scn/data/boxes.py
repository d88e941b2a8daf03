"""Axis-aligned boxes as eight corner coordinates, offsets and overlap."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Corners ordered top-left, top-right, bottom-left, bottom-right as (x, y) pairs."""

    corners: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.corners)
        if len(c) != 8:
            raise ValueError("a box has exactly 8 corner coordinates")
        tlx, tly, trx, try_, blx, bly, brx, bry = c
        if not (tly == try_ and bly == bry and tlx == blx and trx == brx):
            raise ValueError(f"corners {c} do not form an axis-aligned rectangle")
        if not (trx > tlx and bly > tly):
            raise ValueError(f"box {c} has non-positive width or height")
        object.__setattr__(self, "corners", c)

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "BoundingBox":
        return cls((x0, y0, x1, y0, x0, y1, x1, y1))

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls.from_xyxy(x, y, x + w, y + h)

    @property
    def xyxy(self) -> tuple:
        c = self.corners
        return c[0], c[1], c[6], c[7]

    @property
    def width(self) -> float:
        return self.corners[2] - self.corners[0]

    @property
    def height(self) -> float:
        return self.corners[5] - self.corners[1]

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        x0, y0, x1, y1 = self.xyxy
        return (x0 + x1) / 2, (y0 + y1) / 2

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def expand(self, fraction: float) -> "BoundingBox":
        """Grow each side by ``fraction`` of the box's width/height."""
        x0, y0, x1, y1 = self.xyxy
        dx, dy = self.width * fraction, self.height * fraction
        return BoundingBox.from_xyxy(x0 - dx, y0 - dy, x1 + dx, y1 + dy)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        x0, y0, x1, y1 = self.xyxy
        return BoundingBox.from_xyxy(max(x0, 0.0), max(y0, 0.0), min(x1, width), min(y1, height))

    def inside(self, width: float, height: float) -> bool:
        x0, y0, x1, y1 = self.xyxy
        return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height


def compute_offset(b_i: BoundingBox, b_j: BoundingBox) -> np.ndarray:
    """Corner-wise difference ``b_i - b_j`` as an 8-vector."""
    return np.subtract(b_i.corners, b_j.corners, dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy
    bx0, by0, bx1, by1 = b.xyxy
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def overlap_fraction(pairs: Sequence[tuple], threshold: float = 0.2) -> float:
    """Fraction of (box, box) pairs whose IoU is strictly below ``threshold``."""
    if not pairs:
        raise ValueError("overlap_fraction needs at least one pair")
    below = sum(1 for a, b in pairs if iou(a, b) < threshold)
    return below / len(pairs)


def boxes_from_list(rows: Iterable[Sequence[float]]) -> list[BoundingBox]:
    return [BoundingBox.from_xyxy(*r) for r in rows]
