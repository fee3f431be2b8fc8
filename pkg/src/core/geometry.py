"""
Box Geometry
Axis-aligned pixel boxes, IoU and the 0-1000 relative coordinate scheme used
to spell boxes as text.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Tuple

from .errors import GeometryError

QUANT_SCALE = 1000


@dataclass(frozen=True)
class Canvas:
    """Image size in pixels."""
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise GeometryError(f"canvas size must be integral, got {self.width}x{self.height}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"canvas must be at least 1x1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class BBox:
    """Pixel box; (x1, y1) is the upper-left corner, (x2, y2) the lower-right."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        values = self.as_tuple()
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"box coordinates must be finite: {values}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"box corners out of order: {values}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

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
    def center(self) -> Tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def fits(self, canvas: Canvas) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= canvas.width and self.y2 <= canvas.height

    def check_within(self, canvas: Canvas) -> "BBox":
        if not self.fits(canvas):
            raise GeometryError(
                f"box {self.as_tuple()} exceeds canvas {canvas.width}x{canvas.height}"
            )
        return self


@dataclass(frozen=True)
class QuantizedBox:
    """Box in relative integer coordinates, each component in [0, 1000]."""
    qx1: int
    qy1: int
    qx2: int
    qy2: int

    def __post_init__(self):
        values = self.as_tuple()
        for v in values:
            if isinstance(v, bool) or int(v) != v:
                raise GeometryError(f"quantized coordinates must be integers: {values}")
            if not 0 <= v <= QUANT_SCALE:
                raise GeometryError(f"quantized coordinates must lie in [0, {QUANT_SCALE}]: {values}")
        if self.qx1 > self.qx2 or self.qy1 > self.qy2:
            raise GeometryError(f"quantized corners out of order: {values}")

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.qx1, self.qy1, self.qx2, self.qy2)


def round_half_away(value: Fraction) -> int:
    """Round to the nearest integer; exact halves go away from zero."""
    magnitude = math.floor(abs(value) + Fraction(1, 2))
    return magnitude if value >= 0 else -magnitude


def _relative(value: float, extent: int) -> int:
    # Fraction keeps bin midpoints exact, so ties round the documented way
    return round_half_away(Fraction(float(value)) * QUANT_SCALE / extent)


def quantize(box: BBox, canvas: Canvas) -> QuantizedBox:
    """Map a pixel box to 0-1000 relative coordinates (relative, normalised, rounded)."""
    box.check_within(canvas)
    return QuantizedBox(
        _relative(box.x1, canvas.width),
        _relative(box.y1, canvas.height),
        _relative(box.x2, canvas.width),
        _relative(box.y2, canvas.height),
    )


def dequantize(qbox: QuantizedBox, canvas: Canvas) -> BBox:
    """Map relative coordinates back to pixels on ``canvas``."""
    return BBox(
        qbox.qx1 / QUANT_SCALE * canvas.width,
        qbox.qy1 / QUANT_SCALE * canvas.height,
        qbox.qx2 / QUANT_SCALE * canvas.width,
        qbox.qy2 / QUANT_SCALE * canvas.height,
    )


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; a zero-area union yields 0."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union
