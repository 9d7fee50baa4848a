"""Axis-aligned and oriented box geometry.

Boxes carry the coordinate space they live in. Oriented boxes are stored as
four vertices; a canonical quad starts at the vertex nearest the origin and
walks the remaining vertices by ascending polar angle about the centroid,
which makes the signed shoelace area positive in raw (x, y) coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

EPS_AREA = 1e-12
EPS_BOUNDS = 1e-6

Point = tuple[float, float]


class GeometryError(ValueError):
    pass


class DegenerateQuad(GeometryError):
    pass


class SelfIntersecting(GeometryError):
    pass


class SpaceMismatch(GeometryError):
    pass


class OutOfBounds(GeometryError):
    pass


@dataclass(frozen=True)
class CoordSpace:
    """Either pixel space of a ``width`` x ``height`` image, or normalized [0, 1]."""

    kind: str = "normalized"
    width: int | None = None
    height: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "pixel":
            if not (isinstance(self.width, (int, np.integer)) and isinstance(self.height, (int, np.integer))):
                raise GeometryError("pixel space needs integer width and height")
            if self.width <= 0 or self.height <= 0:
                raise GeometryError(f"pixel space must be positive, got {self.width}x{self.height}")
        elif self.kind == "normalized":
            if self.width is not None or self.height is not None:
                raise GeometryError("normalized space takes no size")
        else:
            raise GeometryError(f"unknown coordinate space kind {self.kind!r}")

    @classmethod
    def pixel(cls, width: int, height: int) -> CoordSpace:
        return cls("pixel", int(width), int(height))

    @property
    def is_normalized(self) -> bool:
        return self.kind == "normalized"

    @property
    def extent(self) -> tuple[float, float]:
        """(sx, sy) such that normalized = pixel / (sx, sy)."""
        if self.kind == "pixel":
            return float(self.width), float(self.height)
        return 1.0, 1.0


NORMALIZED = CoordSpace()


@dataclass(frozen=True)
class HBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    space: CoordSpace = NORMALIZED

    def __post_init__(self) -> None:
        coords = self.as_tuple()
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"box min exceeds max: {coords}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class OBox:
    vertices: tuple[Point, Point, Point, Point]
    space: CoordSpace = NORMALIZED
    canonical: bool = False

    def __post_init__(self) -> None:
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) != 4:
            raise GeometryError(f"oriented box needs 4 vertices, got {len(verts)}")
        if not all(math.isfinite(c) for p in verts for c in p):
            raise GeometryError("non-finite quad vertices")
        object.__setattr__(self, "vertices", verts)

    def flat(self) -> tuple[float, ...]:
        return tuple(c for p in self.vertices for c in p)

    @property
    def area(self) -> float:
        return polygon_area(Polygon(self.vertices))


@dataclass(frozen=True)
class Polygon:
    """Vertex list; an empty tuple is the empty polygon."""

    vertices: tuple[Point, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", tuple((float(x), float(y)) for x, y in self.vertices))

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3


Box = Union[HBox, OBox]


def signed_area(points: Sequence[Point]) -> float:
    n = len(points)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def polygon_area(p: Polygon | Sequence[Point]) -> float:
    """Absolute shoelace area."""
    pts = p.vertices if isinstance(p, Polygon) else p
    return abs(signed_area(pts))


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _convex_hull(points: Iterable[Point]) -> list[Point]:
    # Andrew's monotone chain; collinear points dropped, result counter-clockwise (positive area)
    pts = sorted(set(points))
    if len(pts) < 3:
        return pts
    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _area_scale(space: CoordSpace) -> float:
    sx, sy = space.extent
    return sx * sy


def canonicalize_quad(raw: Sequence[Sequence[float]], space: CoordSpace = NORMALIZED) -> OBox:
    """Order four points into a canonical convex quad.

    Any permutation of the same four points yields the same result. Points
    given in a self-intersecting order are reordered along their convex hull.
    """
    pts = [(float(x), float(y)) for x, y in raw]
    if len(pts) != 4:
        raise GeometryError(f"quad needs 4 points, got {len(pts)}")
    if not all(math.isfinite(c) for p in pts for c in p):
        raise GeometryError("non-finite quad vertices")
    hull = _convex_hull(pts)
    if polygon_area(hull) / _area_scale(space) < EPS_AREA:
        raise DegenerateQuad(f"quad area below {EPS_AREA}: {pts}")
    if len(hull) != 4:
        raise SelfIntersecting(f"points do not form a convex quad: {pts}")

    def key(p: Point) -> tuple[float, float, float]:
        return (p[0] * p[0] + p[1] * p[1], math.atan2(p[1], p[0]), p[0])

    start = min(range(4), key=lambda i: key(hull[i]))
    ordered = hull[start:] + hull[:start]
    return OBox(tuple(ordered), space, canonical=True)


def is_canonical(box: OBox) -> bool:
    try:
        return canonicalize_quad(box.vertices, box.space).vertices == box.vertices
    except GeometryError:
        return False


def _check_space(a: Box, b: Box) -> None:
    if a.space != b.space:
        raise SpaceMismatch(f"{a.space} vs {b.space}")


def hbb_iou(a: HBox, b: HBox) -> float:
    _check_space(a, b)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def _line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point:
    # intersection of segment p->q with the infinite line through a, b
    cp = _cross(a, b, p)
    cq = _cross(a, b, q)
    t = cp / (cp - cq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_clip(subject: Polygon, clip: Polygon) -> Polygon:
    """Sutherland-Hodgman clipping of ``subject`` against convex ``clip``.

    Works for either winding of ``clip``. Returns the empty polygon when the
    intersection has no area.
    """
    if subject.is_empty or clip.is_empty:
        return Polygon()
    cverts = list(clip.vertices)
    if signed_area(cverts) < 0:
        cverts.reverse()
    output = list(subject.vertices)
    for i in range(len(cverts)):
        a, b = cverts[i], cverts[(i + 1) % len(cverts)]
        inputs, output = output, []
        if not inputs:
            break
        s = inputs[-1]
        for e in inputs:
            e_in = _cross(a, b, e) >= 0
            s_in = _cross(a, b, s) >= 0
            if e_in:
                if not s_in:
                    output.append(_line_intersection(s, e, a, b))
                output.append(e)
            elif s_in:
                output.append(_line_intersection(s, e, a, b))
            s = e
    if len(output) < 3 or signed_area(output) == 0.0:
        return Polygon()
    return Polygon(output)


def quad_iou(a: OBox, b: OBox) -> float:
    _check_space(a, b)
    area_a, area_b = a.area, b.area
    scale = _area_scale(a.space)
    if area_a / scale < EPS_AREA or area_b / scale < EPS_AREA:
        raise DegenerateQuad("IoU of a degenerate quad")
    pa, pb = Polygon(a.vertices), Polygon(b.vertices)
    if signed_area(pa.vertices) < 0:
        pa = Polygon(pa.vertices[::-1])
    inter = polygon_area(polygon_clip(pa, pb))
    union = area_a + area_b - inter
    return min(1.0, max(0.0, inter / union))


def box_iou(a: Box, b: Box) -> float:
    """IoU for two boxes of the same kind."""
    if isinstance(a, HBox) and isinstance(b, HBox):
        return hbb_iou(a, b)
    if isinstance(a, OBox) and isinstance(b, OBox):
        return quad_iou(a, b)
    raise GeometryError(f"cannot compare {type(a).__name__} with {type(b).__name__}")


def hbox_to_quad(h: HBox) -> OBox:
    corners = [(h.x_min, h.y_min), (h.x_max, h.y_min), (h.x_max, h.y_max), (h.x_min, h.y_max)]
    return canonicalize_quad(corners, h.space)


def quad_bounding_hbox(q: OBox) -> HBox:
    xs = [p[0] for p in q.vertices]
    ys = [p[1] for p in q.vertices]
    return HBox(min(xs), min(ys), max(xs), max(ys), q.space)


def rescale(box: Box, src: CoordSpace, dst: CoordSpace) -> Box:
    """Map ``box`` from ``src`` to ``dst`` space.

    Coordinates outside the source extent by more than ``EPS_BOUNDS``
    (measured in normalized units) raise ``OutOfBounds``. Oriented boxes are
    re-canonicalized in the target space when they were canonical, since
    anisotropic scaling can change which vertex is nearest the origin.
    """
    if box.space != src:
        raise SpaceMismatch(f"box is in {box.space}, not {src}")
    sx, sy = src.extent
    dx, dy = dst.extent

    def conv(x: float, y: float) -> Point:
        nx, ny = x / sx, y / sy
        for n, v in ((nx, x), (ny, y)):
            if n < -EPS_BOUNDS or n > 1 + EPS_BOUNDS:
                raise OutOfBounds(f"coordinate {v} outside {src}")
        return nx * dx, ny * dy

    if isinstance(box, HBox):
        x0, y0 = conv(box.x_min, box.y_min)
        x1, y1 = conv(box.x_max, box.y_max)
        return HBox(x0, y0, x1, y1, dst)
    verts = [conv(x, y) for x, y in box.vertices]
    if box.canonical:
        return canonicalize_quad(verts, dst)
    return OBox(tuple(verts), dst, canonical=False)


def clamp_box(box: Box, space: CoordSpace | None = None) -> Box:
    """Clamp every coordinate into the extent of the box's space."""
    space = space or box.space
    sx, sy = space.extent
    if isinstance(box, HBox):
        return HBox(
            min(max(box.x_min, 0.0), sx),
            min(max(box.y_min, 0.0), sy),
            min(max(box.x_max, 0.0), sx),
            min(max(box.y_max, 0.0), sy),
            box.space,
        )
    verts = [(min(max(x, 0.0), sx), min(max(y, 0.0), sy)) for x, y in box.vertices]
    if box.canonical:
        return canonicalize_quad(verts, box.space)
    return OBox(tuple(verts), box.space)
