"""Bounding boxes, the 11-way spatial relation rule set, and interval IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

INSIDE, COVER, OVERLAP = 1, 2, 3
FIRST_SECTOR = 4
NUM_RELATIONS = 11
DISTANCE_GATE = 0.5


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate box {self.as_tuple()}: need x1 < x2 and y1 < y2")

    @classmethod
    def of(cls, coords) -> BoundingBox:
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


@dataclass(frozen=True)
class TimeSpan:
    """Half-open frame interval ``[start, end)``."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise GeometryError(f"invalid span [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if w > 0 and h > 0 else 0.0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a == b:
        return 1.0
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def _strictly_inside(a: BoundingBox, b: BoundingBox) -> bool:
    """``a`` lies within ``b`` and the two boxes differ."""
    return a != b and b.x1 <= a.x1 and b.y1 <= a.y1 and a.x2 <= b.x2 and a.y2 <= b.y2


def sector_of(dx: float, dy: float) -> int:
    """Index 0..7 of the 45-degree sector holding the vector (dx, dy).

    Angles run counter-clockwise from +x over [0, 360). A vector lying exactly
    on a boundary belongs to the sector that starts there. Only sign and
    magnitude comparisons are used, so (dx, dy) and (-dx, -dy) always land
    exactly four sectors apart.
    """
    if dx == 0 and dy == 0:
        return 0
    ax, ay = abs(dx), abs(dy)
    if dx > 0 and dy >= 0:
        return 0 if ay < ax else 1
    if dx <= 0 and dy > 0:
        return 2 if ax < ay else 3
    if dx < 0 and dy <= 0:
        return 4 if ay < ax else 5
    return 6 if ax < ay else 7


def classify_spatial_relation(i: BoundingBox, j: BoundingBox, frame_diag: float,
                              gate: float = DISTANCE_GATE) -> int | None:
    """Relation class 1..11 of the ordered pair (i, j), or None when no edge is drawn.

    Precedence: equal -> 3, i inside j -> 1, i covers j -> 2, IoU >= 0.5 -> 3,
    then 4 + sector of the center(i)->center(j) vector when the center distance
    is at most ``gate * frame_diag``.
    """
    if frame_diag <= 0:
        raise GeometryError("frame diagonal must be positive")
    if i == j:
        return OVERLAP
    if _strictly_inside(i, j):
        return INSIDE
    if _strictly_inside(j, i):
        return COVER
    if iou(i, j) >= 0.5:
        return OVERLAP
    (cx, cy), (dx_, dy_) = i.center, j.center
    dx, dy = dx_ - cx, dy_ - cy
    if math.hypot(dx, dy) / frame_diag > gate:
        return None
    return FIRST_SECTOR + sector_of(dx, dy)


def temporal_iou(a: TimeSpan, b: TimeSpan) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def snap_span(start_sec: float, end_sec: float, fps: float, num_frames: int) -> TimeSpan:
    """Convert a span in seconds to frame indices: floor(start*fps), ceil(end*fps).

    A 1e-9 slack absorbs binary round-off so that e.g. 0.3 s at 10 fps lands on frame 3.
    """
    start = math.floor(start_sec * fps + 1e-9)
    end = math.ceil(end_sec * fps - 1e-9)
    if start < 0:
        raise GeometryError(f"span starts before the video: {start_sec} s")
    if end <= start:
        end = start + 1
    if end > num_frames:
        raise GeometryError(f"span [{start_sec}, {end_sec}] s lies outside {num_frames} frames")
    return TimeSpan(start, end)
