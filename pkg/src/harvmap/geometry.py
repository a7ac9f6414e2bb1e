"""Harvest-site geometry: alpha-shape delineation and grid tessellation.

Harvested trees arrive as scattered points; their footprint is rebuilt
as the union of Delaunay triangles whose circumradius stays below the
alpha radius, then cut into square grid cells anchored on the national
grid (cell corners at integer multiples of the cell size).  Cells keep
their exact coverage fraction so the 80 % acceptance rule and the area
partition property can both be tested directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError
from shapely.geometry import MultiPolygon, Polygon, box
from shapely.ops import unary_union

DEFAULT_ALPHA_M = 25.0
DEFAULT_CELL_SIZE_M = 32.0
DEFAULT_COVERAGE_THRESHOLD = 0.80


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"circle radius must be positive, got {self.radius}")

    @property
    def area(self) -> float:
        return math.pi * self.radius**2


@dataclass(frozen=True)
class HarvestedSegment:
    """One delineated harvest footprint (polygon, possibly with holes)."""

    id: str
    polygon: Polygon
    source_stand_id: str = ""

    def __post_init__(self):
        if self.polygon.is_empty or self.polygon.area <= 0:
            raise GeometryError(f"segment {self.id}: polygon must have positive area")

    @property
    def area_m2(self) -> float:
        return self.polygon.area


@dataclass(frozen=True)
class HarvestedGridCell:
    """One tessellation cell of a harvested segment."""

    id: str
    ix: int
    iy: int
    polygon: Polygon
    coverage_fraction: float
    accepted: bool

    @property
    def nominal_area_m2(self) -> float:
        return self.polygon.area


def _circumradius(pa, pb, pc) -> float:
    a = math.hypot(pb[0] - pc[0], pb[1] - pc[1])
    b = math.hypot(pa[0] - pc[0], pa[1] - pc[1])
    c = math.hypot(pa[0] - pb[0], pa[1] - pb[1])
    area2 = abs(
        (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1])
    )
    if area2 == 0.0:
        return math.inf
    return a * b * c / (2.0 * area2)


def alpha_shape(points: np.ndarray, alpha: float = DEFAULT_ALPHA_M) -> list[Polygon]:
    """Concave footprint of a point set.

    Keeps the Delaunay triangles whose circumradius is below ``alpha``
    and returns the boundary polygons of their union (several disjoint
    components are possible, holes are preserved).  Fewer than three
    points, or an all-collinear set, is a :class:`GeometryError`; an
    alpha smaller than the point spacing yields an empty list.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError("points must be an (n, 2) array")
    if pts.shape[0] < 3:
        raise GeometryError(f"alpha shape needs at least 3 points, got {pts.shape[0]}")
    if not alpha > 0:
        raise GeometryError(f"alpha must be positive, got {alpha}")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise GeometryError(f"degenerate point set: {exc}") from exc

    kept = []
    for ia, ib, ic in tri.simplices:
        if _circumradius(pts[ia], pts[ib], pts[ic]) < alpha:
            kept.append(Polygon((pts[ia], pts[ib], pts[ic])))
    if not kept:
        return []
    merged = unary_union(kept)
    if isinstance(merged, Polygon):
        return [merged]
    if isinstance(merged, MultiPolygon):
        return sorted(merged.geoms, key=lambda p: (p.bounds[0], p.bounds[1]))
    raise GeometryError(f"unexpected union result: {merged.geom_type}")


def cell_index_of(x: float, y: float, cell_size: float = DEFAULT_CELL_SIZE_M) -> tuple[int, int]:
    """Grid indices of the cell containing (x, y); cells are half-open
    [ix*s, (ix+1)*s) so every point maps to exactly one cell."""
    return (int(math.floor(x / cell_size)), int(math.floor(y / cell_size)))


def tessellate(
    segment: HarvestedSegment,
    cell_size: float = DEFAULT_CELL_SIZE_M,
    threshold: float = DEFAULT_COVERAGE_THRESHOLD,
) -> list[HarvestedGridCell]:
    """Cut a segment into grid-anchored square cells.

    Cell corners sit on integer multiples of ``cell_size`` regardless of
    where the segment lies, so cell identities are stable across segment
    edits.  Every cell that intersects the segment is returned with its
    exact coverage fraction; ``accepted`` marks those at or above the
    threshold.
    """
    if not cell_size > 0:
        raise GeometryError(f"cell size must be positive, got {cell_size}")
    minx, miny, maxx, maxy = segment.polygon.bounds
    ix0, iy0 = cell_index_of(minx, miny, cell_size)
    ix1, iy1 = cell_index_of(maxx, maxy, cell_size)
    cell_area = cell_size * cell_size

    cells: list[HarvestedGridCell] = []
    for ix in range(ix0, ix1 + 1):
        for iy in range(iy0, iy1 + 1):
            cell_poly = box(ix * cell_size, iy * cell_size, (ix + 1) * cell_size, (iy + 1) * cell_size)
            overlap = cell_poly.intersection(segment.polygon).area
            if overlap <= 0.0:
                continue
            coverage = overlap / cell_area
            cells.append(
                HarvestedGridCell(
                    id=f"{segment.id}:{ix}_{iy}",
                    ix=ix,
                    iy=iy,
                    polygon=cell_poly,
                    coverage_fraction=coverage,
                    accepted=coverage >= threshold,
                )
            )
    cells.sort(key=lambda c: (c.ix, c.iy))
    return cells
