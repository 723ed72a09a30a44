"""Normalized axis-aligned box geometry: IoU, L1 distance, transforms.

All coordinates live in the unit square. Boxes are corner-form
(xmin, ymin, xmax, ymax); the detector's center form is converted at the
module boundary. Degenerate (zero-area) boxes are legal values, they just
have IoU 0 against everything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

# Boxes keeping less than this fraction of their area after a crop or
# translate are dropped as noise labels.
MIN_VISIBLE_FRACTION = 0.1


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        # normalize numpy scalars so equality and repr stay plain floats
        for name in ("xmin", "ymin", "xmax", "ymax"):
            v = getattr(self, name)
            if type(v) is not float:
                object.__setattr__(self, name, float(v))
        if not (self.xmin <= self.xmax and self.ymin <= self.ymax):
            raise ValueError(f"inverted box: {self}")
        for v in (self.xmin, self.ymin, self.xmax, self.ymax):
            if not (-1e-9 <= v <= 1 + 1e-9):
                raise ValueError(f"coordinate outside unit square: {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self) -> tuple:
        """(cx, cy, w, h) center form."""
        return (
            0.5 * (self.xmin + self.xmax),
            0.5 * (self.ymin + self.ymax),
            self.xmax - self.xmin,
            self.ymax - self.ymin,
        )

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "BBox":
        """Center form to corner form, clipped into the unit square."""
        return BBox(
            max(0.0, min(1.0, cx - 0.5 * w)),
            max(0.0, min(1.0, cy - 0.5 * h)),
            max(0.0, min(1.0, cx + 0.5 * w)),
            max(0.0, min(1.0, cy + 0.5 * h)),
        )


@dataclass(frozen=True)
class GeomTransform:
    """One geometric transform step.

    kind:
      "hflip"       - mirror about the vertical axis; no parameters
      "translate"   - shift by (dx, dy), normalized units
      "crop_resize" - crop to `window` and rescale it to the full frame
    """

    kind: str
    dx: float = 0.0
    dy: float = 0.0
    window: Optional[BBox] = None

    def __post_init__(self):
        if self.kind not in ("hflip", "translate", "crop_resize"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "crop_resize":
            if self.window is None or self.window.area <= 0:
                raise ValueError("crop_resize needs a window with positive area")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def l1_distance(a: BBox, b: BBox) -> float:
    """Sum of absolute corner-coordinate differences."""
    return (
        abs(a.xmin - b.xmin)
        + abs(a.ymin - b.ymin)
        + abs(a.xmax - b.xmax)
        + abs(a.ymax - b.ymax)
    )


def _clip01(v: float) -> float:
    return max(0.0, min(1.0, v))


def apply_transform(
    t: GeomTransform, b: BBox, min_visible: float = MIN_VISIBLE_FRACTION
) -> Optional[BBox]:
    """Map a box through a transform, clipping to the unit square.

    Returns None when the visible part of the box after a crop or
    translate keeps less than `min_visible` of its original area.
    """
    if t.kind == "hflip":
        return BBox(1.0 - b.xmax, b.ymin, 1.0 - b.xmin, b.ymax)

    if t.kind == "translate":
        moved = BBox(
            _clip01(b.xmin + t.dx),
            _clip01(b.ymin + t.dy),
            _clip01(b.xmax + t.dx),
            _clip01(b.ymax + t.dy),
        )
        if b.area > 0 and moved.area < min_visible * b.area:
            return None
        return moved

    # crop_resize: intersect with the window, then stretch the window to
    # the full frame.
    w = t.window
    vx0 = max(b.xmin, w.xmin)
    vy0 = max(b.ymin, w.ymin)
    vx1 = min(b.xmax, w.xmax)
    vy1 = min(b.ymax, w.ymax)
    if vx1 <= vx0 or vy1 <= vy0:
        return None
    visible = (vx1 - vx0) * (vy1 - vy0)
    if b.area > 0 and visible < min_visible * b.area:
        return None
    sx = w.xmax - w.xmin
    sy = w.ymax - w.ymin
    return BBox(
        _clip01((vx0 - w.xmin) / sx),
        _clip01((vy0 - w.ymin) / sy),
        _clip01((vx1 - w.xmin) / sx),
        _clip01((vy1 - w.ymin) / sy),
    )


def apply_transforms(
    ts: Sequence[GeomTransform], b: BBox, min_visible: float = MIN_VISIBLE_FRACTION
) -> Optional[BBox]:
    """Apply a transform pipeline in order; None is absorbing."""
    out: Optional[BBox] = b
    for t in ts:
        out = apply_transform(t, out, min_visible=min_visible)
        if out is None:
            return None
    return out
