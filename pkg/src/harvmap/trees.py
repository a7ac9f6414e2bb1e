"""Tree records, plot units and plot-level forest attribute computation.

A plot (or harvested grid cell) carries a tree list; this module turns
that list into the six per-hectare stand attributes used throughout the
package: Lorey's height (HL, m), volume (V, m3/ha), stem frequency
(N, stems/ha), above-ground biomass (AGB, t/ha), basal area (G, m2/ha)
and quadratic mean diameter (QMD, cm).  It also classifies plots into
the evaluation datasets ALL / PROD / UPROD from their stand descriptors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .geometry import Circle

FIELD_CALIPER_THRESHOLD_CM = 5.0
BREAST_HEIGHT_M = 1.3

ATTRIBUTE_NAMES = ("HL", "V", "N", "AGB", "G", "QMD")


class Species(Enum):
    SPRUCE = "spruce"
    PINE = "pine"
    DECIDUOUS = "deciduous"


class TreeSource(Enum):
    FIELD = "field"
    HARVESTER = "harvester"


class Maturity(IntEnum):
    """Stand development stage, M1 (regeneration) to M5 (mature)."""

    M1 = 1
    M2 = 2
    M3 = 3
    M4 = 4
    M5 = 5


class Dataset(Enum):
    ALL = "ALL"
    PROD = "PROD"
    UPROD = "UPROD"


class DomainError(ValueError):
    """Invalid domain value (non-positive area, bad record, ...)."""


class MissingDescriptorError(DomainError):
    """A stand descriptor required by the classification rules is absent."""


@dataclass(frozen=True)
class TreeRecord:
    """One measured or reconstructed tree."""

    id: str
    species: Species
    dbh_cm: float
    height_m: float
    volume_m3: float
    agb_kg: float
    x: float
    y: float
    source: TreeSource

    def __post_init__(self):
        if not self.dbh_cm > 0:
            raise DomainError(f"tree {self.id}: dbh must be positive, got {self.dbh_cm}")
        if self.source is TreeSource.FIELD and self.dbh_cm < FIELD_CALIPER_THRESHOLD_CM:
            raise DomainError(
                f"tree {self.id}: field trees are calipered from "
                f"{FIELD_CALIPER_THRESHOLD_CM} cm, got {self.dbh_cm}"
            )
        if not self.height_m > BREAST_HEIGHT_M:
            raise DomainError(
                f"tree {self.id}: height must exceed breast height, got {self.height_m}"
            )
        for name, value in (("volume", self.volume_m3), ("agb", self.agb_kg)):
            if not (math.isfinite(value) and value >= 0):
                raise DomainError(f"tree {self.id}: {name} must be finite and >= 0, got {value}")

    @property
    def basal_area_m2(self) -> float:
        return math.pi * (self.dbh_cm / 200.0) ** 2


@dataclass(frozen=True)
class AttributeVector:
    """The six plot-level attributes.

    ``hl`` and ``qmd`` are ``None`` on treeless units instead of 0 or NaN
    so that the undefined state cannot leak into downstream means.
    """

    hl: float | None
    v: float
    n: float
    agb: float
    g: float
    qmd: float | None

    _IDENTITY_RTOL = 1e-9

    def __post_init__(self):
        for name in ("v", "n", "agb", "g"):
            if getattr(self, name) < 0:
                raise DomainError(f"attribute {name} must be >= 0")
        if self.n == 0:
            if self.v != 0 or self.agb != 0 or self.g != 0:
                raise DomainError("treeless unit must have zero v, agb and g")
            if self.hl is not None or self.qmd is not None:
                raise DomainError("hl and qmd are undefined on treeless units")
        else:
            if self.hl is None or self.qmd is None:
                raise DomainError("hl and qmd must be defined when n > 0")
            if self.hl < 0 or self.qmd < 0:
                raise DomainError("hl and qmd must be >= 0")
            # g, qmd and n are algebraically locked together
            implied_g = self.qmd**2 * math.pi / 40000.0 * self.n
            if not math.isclose(implied_g, self.g, rel_tol=self._IDENTITY_RTOL, abs_tol=1e-12):
                raise DomainError(
                    f"inconsistent attributes: qmd/n imply g={implied_g}, got {self.g}"
                )

    @property
    def hl_defined(self) -> bool:
        return self.hl is not None

    def as_dict(self) -> dict[str, float]:
        """Attribute values keyed by canonical name; NaN marks undefined."""
        return {
            "HL": self.hl if self.hl is not None else float("nan"),
            "V": self.v,
            "N": self.n,
            "AGB": self.agb,
            "G": self.g,
            "QMD": self.qmd if self.qmd is not None else float("nan"),
        }

    @classmethod
    def empty(cls) -> "AttributeVector":
        return cls(hl=None, v=0.0, n=0.0, agb=0.0, g=0.0, qmd=None)


@dataclass(frozen=True)
class PlotUnit:
    """A field plot or harvested grid cell with its stand descriptors."""

    id: str
    geometry: object  # Circle or shapely polygon
    area_m2: float
    trees: tuple[TreeRecord, ...] = ()
    maturity: Maturity | None = None
    site_index: float | None = None
    conif_prop: float | None = None
    fwd_dist_m: float | None = None
    is_forest: bool = True
    meas_year: int = 0

    def __post_init__(self):
        if not self.area_m2 > 0:
            raise DomainError(f"plot {self.id}: area must be positive, got {self.area_m2}")
        if self.conif_prop is not None and not 0.0 <= self.conif_prop <= 1.0:
            raise DomainError(f"plot {self.id}: coniferous proportion outside [0, 1]")

    def attributes(self) -> AttributeVector:
        return compute_attributes(self.trees, self.area_m2)

    @property
    def center(self) -> tuple[float, float]:
        if isinstance(self.geometry, Circle):
            return (self.geometry.cx, self.geometry.cy)
        c = self.geometry.centroid
        return (c.x, c.y)


@dataclass(frozen=True)
class DomainRuleSet:
    """Thresholds selecting the ALL / PROD / UPROD plot datasets.

    PROD and UPROD use strict inequalities, so a plot sitting exactly on
    a threshold belongs to neither.  The site-index intervals of the two
    rules must not overlap, which makes them mutually exclusive on every
    plot.
    """

    all_maturities: frozenset = frozenset(
        {Maturity.M2, Maturity.M3, Maturity.M4, Maturity.M5}
    )
    prod_min_site_index: float = 11.0
    prod_min_conif_prop: float = 0.80
    prod_max_fwd_dist_m: float = 500.0
    uprod_max_site_index: float = 11.0
    uprod_max_conif_prop: float = 0.60
    uprod_min_fwd_dist_m: float = 500.0

    def __post_init__(self):
        if self.prod_min_site_index < self.uprod_max_site_index:
            raise DomainError(
                "PROD and UPROD site-index intervals overlap: "
                f"({self.uprod_max_site_index}, {self.prod_min_site_index})"
            )
        if Maturity.M1 in self.all_maturities:
            raise DomainError("regeneration stands (M1) are never part of the datasets")


def parse_species(token: str) -> Species:
    """Species from a text code; unknown codes group with deciduous."""
    try:
        return Species(token.strip().lower())
    except ValueError:
        warnings.warn(
            f"unknown species code {token!r} grouped with deciduous", stacklevel=2
        )
        return Species.DECIDUOUS


def _sorted_by_id(trees: Iterable[TreeRecord]) -> list[TreeRecord]:
    return sorted(trees, key=lambda t: t.id)


def compute_attributes(trees: Iterable[TreeRecord], area_m2: float) -> AttributeVector:
    """Aggregate a tree list into per-hectare attributes.

    Accumulation runs in sorted tree-id order with compensated summation,
    so the result is bit-identical regardless of input order or thread
    count.  An empty tree list yields the zero vector with HL and QMD
    flagged undefined; a non-positive area is an error.
    """
    if not area_m2 > 0:
        raise DomainError(f"area must be positive, got {area_m2}")
    ordered = _sorted_by_id(trees)
    count = len(ordered)
    if count == 0:
        return AttributeVector.empty()

    per_ha = 1e4 / area_m2
    dbh = np.array([t.dbh_cm for t in ordered], dtype=np.float64)
    ba = np.array([t.basal_area_m2 for t in ordered], dtype=np.float64)
    vol = np.array([t.volume_m3 for t in ordered], dtype=np.float64)
    agb = np.array([t.agb_kg for t in ordered], dtype=np.float64)
    ba_h = np.array([t.basal_area_m2 * t.height_m for t in ordered], dtype=np.float64)

    sum_ba = _kernels.kahan_sum(ba)
    return AttributeVector(
        hl=_kernels.kahan_sum(ba_h) / sum_ba,
        v=_kernels.kahan_sum(vol) * per_ha,
        n=count * per_ha,
        agb=_kernels.kahan_sum(agb) / 1000.0 * per_ha,
        g=sum_ba * per_ha,
        qmd=math.sqrt(_kernels.kahan_sum(dbh * dbh) / count),
    )


def dominant_species(trees: Iterable[TreeRecord]) -> Species | None:
    """Species holding the largest volume share; ``None`` for no trees.

    Ties resolve in species declaration order (spruce, pine, deciduous).
    """
    ordered = _sorted_by_id(trees)
    if not ordered:
        return None
    totals = {sp: 0.0 for sp in Species}
    by_species: dict[Species, list[float]] = {sp: [] for sp in Species}
    for tree in ordered:
        by_species[tree.species].append(tree.volume_m3)
    for sp, vols in by_species.items():
        if vols:
            totals[sp] = _kernels.kahan_sum(np.asarray(vols, dtype=np.float64))
    return max(Species, key=lambda sp: totals[sp])


def classify_domain(plot: PlotUnit, rules: DomainRuleSet | None = None) -> frozenset[Dataset]:
    """Dataset labels for one plot.

    Raises :class:`MissingDescriptorError` when a descriptor needed by
    the rule set is absent; use :func:`classify_plots` to classify in
    bulk with unclassifiable plots counted rather than raised.
    """
    rules = rules or DomainRuleSet()
    if plot.maturity is None:
        raise MissingDescriptorError(f"plot {plot.id}: maturity is required")

    labels: set[Dataset] = set()
    in_all = plot.is_forest and plot.maturity in rules.all_maturities
    if in_all:
        labels.add(Dataset.ALL)
        for descriptor in ("site_index", "conif_prop", "fwd_dist_m"):
            if getattr(plot, descriptor) is None:
                raise MissingDescriptorError(f"plot {plot.id}: {descriptor} is required")
        if (
            plot.site_index > rules.prod_min_site_index
            and plot.conif_prop > rules.prod_min_conif_prop
            and plot.fwd_dist_m < rules.prod_max_fwd_dist_m
        ):
            labels.add(Dataset.PROD)
        elif (
            plot.site_index < rules.uprod_max_site_index
            and plot.conif_prop < rules.uprod_max_conif_prop
            and plot.fwd_dist_m > rules.uprod_min_fwd_dist_m
        ):
            labels.add(Dataset.UPROD)
    return frozenset(labels)


def classify_plots(
    plots: Sequence[PlotUnit], rules: DomainRuleSet | None = None
) -> tuple[dict[str, frozenset[Dataset]], int]:
    """Classify many plots; returns (labels by plot id, unclassifiable count)."""
    rules = rules or DomainRuleSet()
    labels: dict[str, frozenset[Dataset]] = {}
    unclassifiable = 0
    for plot in plots:
        try:
            labels[plot.id] = classify_domain(plot, rules)
        except MissingDescriptorError:
            unclassifiable += 1
    if unclassifiable:
        warnings.warn(
            f"{unclassifiable} plot(s) lacked required descriptors and were excluded",
            stacklevel=2,
        )
    return labels, unclassifiable
