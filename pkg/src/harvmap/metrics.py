"""Laser echo normalization, clipping and plot-level height metrics.

Echoes are height-normalized by bilinear interpolation of a terrain
raster, clipped to plot or cell geometry, and summarized (first echoes
only) into the standard metric set: height mean and variance, the 10th,
25th, 50th, 75th and 95th percentiles, the proportion of echoes above
the 2 m canopy threshold (d2), and the growing-season lag between field
measurement and laser acquisition (time_diff).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon
from shapely import intersects_xy

from . import _kernels
from .geometry import Circle, GeometryError

D2_THRESHOLD_M = 2.0
PERCENTILE_FRACTIONS = np.array([0.10, 0.25, 0.50, 0.75, 0.95])


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EchoArray:
    """Column-oriented echo storage (one entry per echo).

    ``classification`` follows the usual point-class convention (2 =
    ground); it is carried through the files untouched since inputs
    arrive pre-classified.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_number: np.ndarray
    num_returns: np.ndarray
    classification: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("y", "z", "return_number", "num_returns", "classification"):
            if getattr(self, name).shape[0] != n:
                raise MetricsError(f"echo column {name} has mismatched length")
        if n and (self.return_number < 1).any():
            raise MetricsError("return_number must be >= 1")
        if n and (self.return_number > self.num_returns).any():
            raise MetricsError("return_number cannot exceed num_returns")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def select(self, mask: np.ndarray) -> "EchoArray":
        return EchoArray(
            x=self.x[mask],
            y=self.y[mask],
            z=self.z[mask],
            return_number=self.return_number[mask],
            num_returns=self.num_returns[mask],
            classification=self.classification[mask],
        )

    def with_z(self, z: np.ndarray) -> "EchoArray":
        return EchoArray(
            x=self.x,
            y=self.y,
            z=z,
            return_number=self.return_number,
            num_returns=self.num_returns,
            classification=self.classification,
        )

    @classmethod
    def empty(cls) -> "EchoArray":
        return cls(
            x=np.empty(0),
            y=np.empty(0),
            z=np.empty(0),
            return_number=np.empty(0, dtype=np.int64),
            num_returns=np.empty(0, dtype=np.int64),
            classification=np.empty(0, dtype=np.int64),
        )


@dataclass(frozen=True)
class TerrainRaster:
    """Regular elevation grid; row 0 of ``grid`` is the southernmost row."""

    xll: float
    yll: float
    cell_size: float
    nodata: float
    grid: np.ndarray

    def __post_init__(self):
        if not self.cell_size > 0:
            raise MetricsError(f"cell size must be positive, got {self.cell_size}")
        if self.grid.ndim != 2:
            raise MetricsError("terrain grid must be 2-dimensional")

    @property
    def nrows(self) -> int:
        return int(self.grid.shape[0])

    @property
    def ncols(self) -> int:
        return int(self.grid.shape[1])

    def extent(self) -> tuple[float, float, float, float]:
        return (
            self.xll,
            self.yll,
            self.xll + self.ncols * self.cell_size,
            self.yll + self.nrows * self.cell_size,
        )

    def sample(self, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear elevations at the given points plus a validity mask
        (False where a neighboring cell is nodata)."""
        return _kernels.bilinear(
            self.grid,
            self.xll,
            self.yll,
            self.cell_size,
            self.nodata,
            np.ascontiguousarray(xs, dtype=np.float64),
            np.ascontiguousarray(ys, dtype=np.float64),
        )


@dataclass(frozen=True)
class MetricsVector:
    """Height metrics for one unit; NaN-valued when no first echo exists."""

    hmean: float
    hvar: float
    h10: float
    h25: float
    h50: float
    h75: float
    h95: float
    d2: float
    time_diff: int
    n_first_echoes: int

    def __post_init__(self):
        if self.time_diff < 0:
            raise MetricsError("time_diff is floored at zero growing seasons")
        if self.n_first_echoes < 0:
            raise MetricsError("n_first_echoes must be >= 0")
        if not self.defined:
            return
        pct = (self.h10, self.h25, self.h50, self.h75, self.h95)
        if any(a > b for a, b in zip(pct, pct[1:])):
            raise MetricsError(f"percentiles must be non-decreasing, got {pct}")
        if not 0.0 <= self.d2 <= 1.0:
            raise MetricsError(f"d2 must lie in [0, 1], got {self.d2}")
        if self.hvar < 0:
            raise MetricsError(f"variance must be >= 0, got {self.hvar}")

    @property
    def defined(self) -> bool:
        return self.n_first_echoes > 0

    def as_dict(self) -> dict[str, float]:
        return {
            "hmean": self.hmean,
            "hvar": self.hvar,
            "h10": self.h10,
            "h25": self.h25,
            "h50": self.h50,
            "h75": self.h75,
            "h95": self.h95,
            "d2": self.d2,
            "time_diff": float(self.time_diff),
        }

    @classmethod
    def undefined(cls, time_diff: int) -> "MetricsVector":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan, nan, nan, time_diff, 0)


def normalize_heights(
    echoes: EchoArray, terrain: TerrainRaster
) -> tuple[EchoArray, int]:
    """Subtract bilinear terrain elevation from echo z, floored at 0.

    Echoes over nodata cells are dropped; the second return value counts
    them.  Echoes farther than one cell outside the raster extent are a
    :class:`MetricsError`.
    """
    if len(echoes) == 0:
        return echoes, 0
    x0, y0, x1, y1 = terrain.extent()
    margin = terrain.cell_size
    out_of_extent = (
        (echoes.x < x0 - margin)
        | (echoes.x > x1 + margin)
        | (echoes.y < y0 - margin)
        | (echoes.y > y1 + margin)
    )
    if out_of_extent.any():
        raise MetricsError(
            f"{int(out_of_extent.sum())} echo(es) fall more than one cell "
            "outside the terrain extent"
        )
    elevation, ok = terrain.sample(echoes.x, echoes.y)
    normalized = np.maximum(echoes.z - elevation, 0.0)
    dropped = int(len(echoes) - np.count_nonzero(ok))
    return echoes.select(ok).with_z(normalized[ok]), dropped


def clip(echoes: EchoArray, geometry: Circle | Polygon) -> EchoArray:
    """Echoes inside (boundary inclusive) a circle or polygon."""
    if isinstance(geometry, Circle):
        mask = _kernels.in_circle(
            np.ascontiguousarray(echoes.x, dtype=np.float64),
            np.ascontiguousarray(echoes.y, dtype=np.float64),
            geometry.cx,
            geometry.cy,
            geometry.radius,
        )
        return echoes.select(mask)
    if isinstance(geometry, Polygon):
        if geometry.is_empty or geometry.area <= 0:
            raise GeometryError("cannot clip to a zero-area polygon")
        # intersects_xy is boundary inclusive for point queries
        return echoes.select(intersects_xy(geometry, echoes.x, echoes.y))
    raise GeometryError(f"unsupported clip geometry: {type(geometry).__name__}")


def first_echo_heights(echoes: EchoArray) -> np.ndarray:
    return np.ascontiguousarray(echoes.z[echoes.return_number == 1], dtype=np.float64)


def compute_metrics(
    echoes: EchoArray,
    reference_year: int,
    acquisition_year: int,
    d2_threshold: float = D2_THRESHOLD_M,
) -> MetricsVector:
    """Metric vector from normalized echoes of one unit.

    Only first echoes (return_number == 1) enter the metrics.  The
    percentile rule is linear interpolation between closest order
    statistics at rank 1 + (n - 1) * p; variance uses the n - 1
    denominator; d2 counts echoes strictly above the threshold.  With no
    first echoes at all, the vector comes back NaN-valued with
    ``defined`` False.
    """
    time_diff = max(0, int(reference_year) - int(acquisition_year))
    z = first_echo_heights(echoes)
    n = z.shape[0]
    if n == 0:
        return MetricsVector.undefined(time_diff)
    if n == 1:
        warnings.warn("single first echo: variance reported as 0", stacklevel=2)
    hmean, hvar = _kernels.mean_var(z)
    pct = _kernels.percentiles_sorted(np.sort(z), PERCENTILE_FRACTIONS)
    d2 = _kernels.count_above(z, d2_threshold) / n
    return MetricsVector(
        hmean=hmean,
        hvar=hvar,
        h10=float(pct[0]),
        h25=float(pct[1]),
        h50=float(pct[2]),
        h75=float(pct[3]),
        h95=float(pct[4]),
        d2=d2,
        time_diff=time_diff,
        n_first_echoes=int(n),
    )


def percentiles(z: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Linear-interpolation percentiles of arbitrary fractions (0..1)."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.shape[0] == 0:
        raise MetricsError("percentiles of an empty sample are undefined")
    fr = np.ascontiguousarray(fractions, dtype=np.float64)
    if ((fr < 0) | (fr > 1)).any():
        raise MetricsError("percentile fractions must lie in [0, 1]")
    return _kernels.percentiles_sorted(np.sort(z), fr)
