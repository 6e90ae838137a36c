"""Box arithmetic, IoU, context/frame rectangles, and pixel-to-cell projection.

Boxes are continuous, 0-based, with x2/y2 exclusive. Coordinates may fall
outside the image; clamping happens only when a box is projected onto the
feature grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with x1 < x2 and y1 < y2 (continuous pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

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

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class CellRect:
    """Inclusive rectangle of feature-grid cells (at least one cell)."""

    row_start: int
    row_end: int
    col_start: int
    col_end: int

    def __post_init__(self) -> None:
        if self.row_end < self.row_start or self.col_end < self.col_start:
            raise ValueError(f"empty cell rect {self}")

    @property
    def n_rows(self) -> int:
        return self.row_end - self.row_start + 1

    @property
    def n_cols(self) -> int:
        return self.col_end - self.col_start + 1


@dataclass(frozen=True)
class FeatureGeometry:
    """Pixel stride and grid size of a feature map."""

    stride: int
    fmap_h: int
    fmap_w: int

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.fmap_h < 1 or self.fmap_w < 1:
            raise ValueError("feature grid must be at least 1x1")


def box_from_voc(x1: float, y1: float, x2: float, y2: float) -> Box:
    """Convert a 1-based inclusive pixel annotation to a continuous box."""
    return Box(x1 - 1.0, y1 - 1.0, float(x2), float(y2))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def scale_box(b: Box, factor: float) -> Box:
    """Scale both sides by `factor`, keeping the center fixed."""
    if factor <= 0.0:
        raise ValueError("scale factor must be positive")
    cx, cy = b.center
    hw = 0.5 * b.width * factor
    hh = 0.5 * b.height * factor
    return Box(cx - hw, cy - hh, cx + hw, cy + hh)


def context_outer(b: Box, ratio: float = 1.8) -> Box:
    """Outer rectangle of the context ring around a ROI."""
    return scale_box(b, ratio)


def frame_inner(b: Box, ratio: float = 1.8) -> Box:
    """Inner rectangle of the frame ring inside a ROI."""
    return scale_box(b, 1.0 / ratio)


def project_to_feature(b: Box, g: FeatureGeometry) -> CellRect:
    """Project a pixel box onto the feature grid (zero-offset transform).

    Start cells use floor(coord/stride), end cells ceil(coord/stride)-1; both
    are clamped into the grid and the result never comes back empty.
    """

    def _span(lo: float, hi: float, n_cells: int) -> tuple[int, int]:
        start = min(max(math.floor(lo / g.stride), 0), n_cells - 1)
        end = min(max(math.ceil(hi / g.stride) - 1, 0), n_cells - 1)
        if end < start:
            end = start
        return start, end

    row_start, row_end = _span(b.y1, b.y2, g.fmap_h)
    col_start, col_end = _span(b.x1, b.x2, g.fmap_w)
    return CellRect(row_start, row_end, col_start, col_end)


def filter_proposals(boxes: Iterable[Box], min_side: float = 20.0) -> list[Box]:
    """Keep boxes whose width and height are both strictly larger than min_side."""
    return [b for b in boxes if b.width > min_side and b.height > min_side]


def flip_box(b: Box, image_width: float) -> Box:
    """Mirror a box horizontally within an image of the given width."""
    return Box(image_width - b.x2, b.y1, image_width - b.x1, b.y2)


def rescale_box(b: Box, sx: float, sy: float) -> Box:
    """Multiply x coordinates by sx and y coordinates by sy."""
    if sx <= 0.0 or sy <= 0.0:
        raise ValueError("rescale factors must be positive")
    return Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
