"""Axis-aligned boxes, IoU, and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Half-open rectangle [top, bottom) x [left, right) in pixel coordinates."""

    top: float
    left: float
    bottom: float
    right: float

    def __post_init__(self):
        if self.bottom < self.top or self.right < self.left:
            raise ValueError(f"degenerate box: {self}")

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def area(self) -> float:
        return self.height * self.width

    def intersection(self, other: "Box") -> float:
        h = min(self.bottom, other.bottom) - max(self.top, other.top)
        w = min(self.right, other.right) - max(self.left, other.left)
        return max(0.0, h) * max(0.0, w)

    def iou(self, other: "Box") -> float:
        inter = self.intersection(other)
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def clipped(self, height: float, width: float) -> "Box":
        return Box(
            max(0.0, min(self.top, height)),
            max(0.0, min(self.left, width)),
            max(0.0, min(self.bottom, height)),
            max(0.0, min(self.right, width)),
        )


def nms_select(candidates, iou_threshold: float, max_keep: int):
    """Greedy descending-energy selection of patch candidates.

    A candidate is suppressed iff its box IoU with an already-kept box
    exceeds ``iou_threshold``.  At most ``max_keep`` are kept; the result
    is ordered by descending energy.  Ties in energy are broken by
    (image_id, location) so the selection is order-independent.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if max_keep < 1:
        raise ValueError(f"max_keep must be >= 1, got {max_keep}")
    ordered = sorted(candidates, key=lambda c: (-c.energy, c.image_id, c.location))
    kept = []
    for cand in ordered:
        if len(kept) == max_keep:
            break
        if all(cand.box.iou(k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept
