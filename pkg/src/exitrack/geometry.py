"""Axis-aligned box algebra in [x, y, w, h] convention.

Boxes are continuous-valued (sub-pixel). A box whose four fields all
equal -1 is the EXIT sentinel marking an absent target; sentinels are
rejected by every overlap/distance operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "BBox",
    "EXIT_BOX",
    "SentinelBoxError",
    "iou",
    "giou",
    "norm_center_distance",
]


class SentinelBoxError(ValueError):
    """An EXIT sentinel was passed where a real box is required."""


@dataclass(frozen=True)
class BBox:
    """Top-left anchored box. w and h must be positive unless sentinel.

    Boxes need not lie inside the frame; targets may straddle the border.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.is_exit:
            return
        if not (self.w > 0 and self.h > 0):
            raise ValueError(
                f"non-sentinel box needs w > 0 and h > 0, got w={self.w}, h={self.h}"
            )

    @property
    def is_exit(self) -> bool:
        return self.x == -1 and self.y == -1 and self.w == -1 and self.h == -1

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


EXIT_BOX = BBox(-1, -1, -1, -1)


def _require_real(*boxes: BBox) -> None:
    for b in boxes:
        if b.is_exit:
            raise SentinelBoxError("EXIT sentinel box has no geometry")


def _intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union, in [0, 1]."""
    _require_real(a, b)
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: iou - (hull - union) / hull, in [-1, 1].

    hull is the smallest axis-aligned box enclosing both inputs.
    """
    _require_real(a, b)
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    hull_w = max(a.x2, b.x2) - min(a.x, b.x)
    hull_h = max(a.y2, b.y2) - min(a.y, b.y)
    hull = hull_w * hull_h
    return inter / union - (hull - union) / hull


def norm_center_distance(pred: BBox, gt: BBox, ord: str = "l2") -> float:
    """Center offset of pred from gt, normalized by gt width/height.

    The offset vector ((cxp-cxg)/wg, (cyp-cyg)/hg) is reduced with the
    Euclidean norm by default; ord="l1" selects the absolute-sum variant.
    """
    _require_real(pred, gt)
    cxp, cyp = pred.center
    cxg, cyg = gt.center
    dx = (cxp - cxg) / gt.w
    dy = (cyp - cyg) / gt.h
    if ord == "l2":
        return math.hypot(dx, dy)
    if ord == "l1":
        return abs(dx) + abs(dy)
    raise ValueError(f"unknown norm {ord!r}, expected 'l2' or 'l1'")
