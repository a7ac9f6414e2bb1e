"""Harvester production records and per-tree stem reconstruction.

A cut-to-length harvester logs one diameter every 10 cm along each
processed stem but records neither breast-height diameter, total height
nor top volume.  This module rebuilds those from the profile:

* DBH by linear interpolation of the median-smoothed profile at 1.3 m,
* total height and taper shape by a damped Gauss-Newton fit of the
  power taper d(h) = D * ((H - h) / (H - 1.3))**k to the profile,
* total stem volume from the closed-form integral of the fitted taper,
* above-ground biomass from a configurable three-parameter power form
  a * dbh**b * height**c per species.

Machine-positioned trees (no boom sensors) get a seeded uniform
position jitter so they stop forming stripes along the machine trail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .trees import Species, TreeRecord, TreeSource, parse_species

MEASUREMENT_SPACING_M = 0.10
BREAST_HEIGHT_M = 1.3
DEFAULT_JITTER_AMPLITUDE_M = 8.0
DEFAULT_STUMP_HEIGHT_M = 0.2
MAX_PROFILE_START_M = 2.0
MIN_MEASUREMENTS_FOR_FIT = 5
FALLBACK_TIP_SLOPE_M_PER_CM = 0.9


class ReconstructionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class PositioningMode(Enum):
    BOOM = "boom"
    MACHINE = "machine"


@dataclass(frozen=True)
class StemProfile:
    """Diameter sequence of one harvested stem at fixed 10 cm spacing.

    ``base_height_m`` is the height above ground of the first diameter;
    diameters are in cm (harvester files store mm, parsing converts).
    """

    tree_id: str
    species: Species
    x: float
    y: float
    positioning_mode: PositioningMode
    harvest_year: int
    base_height_m: float
    diameters_cm: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diameters_cm, dtype=np.float64)
        object.__setattr__(self, "diameters_cm", d)
        if d.ndim != 1 or d.shape[0] == 0:
            raise ReconstructionError(f"tree {self.tree_id}: empty diameter sequence")
        if (d <= 0).any():
            raise ReconstructionError(f"tree {self.tree_id}: diameters must be positive")
        if self.base_height_m < 0:
            raise ReconstructionError(f"tree {self.tree_id}: negative base height")

    @property
    def heights_m(self) -> np.ndarray:
        return self.base_height_m + MEASUREMENT_SPACING_M * np.arange(self.diameters_cm.shape[0])

    @property
    def top_height_m(self) -> float:
        return self.base_height_m + MEASUREMENT_SPACING_M * (self.diameters_cm.shape[0] - 1)


@dataclass(frozen=True)
class SpeciesAllometry:
    """Biomass coefficients and taper start value for one species."""

    biomass_a: float
    biomass_b: float
    biomass_c: float
    taper_exponent_prior: float = 0.85

    def __post_init__(self):
        for name in ("biomass_a", "biomass_b", "biomass_c", "taper_exponent_prior"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class AllometryConfig:
    """Per-species reconstruction parameters.

    The default biomass coefficients are deliberately simple power-form
    stand-ins of realistic magnitude; any operational deployment should
    override them with locally calibrated functions.
    """

    species: dict[Species, SpeciesAllometry] = field(
        default_factory=lambda: {
            Species.SPRUCE: SpeciesAllometry(0.052, 2.0, 1.0),
            Species.PINE: SpeciesAllometry(0.048, 2.0, 1.0),
            Species.DECIDUOUS: SpeciesAllometry(0.045, 2.0, 1.0),
        }
    )
    stump_height_m: float = DEFAULT_STUMP_HEIGHT_M

    def __post_init__(self):
        missing = [sp.value for sp in Species if sp not in self.species]
        extra = [sp for sp in self.species if not isinstance(sp, Species)]
        if missing or extra:
            raise ConfigurationError(
                f"allometry must cover each species exactly once (missing: {missing})"
            )
        if self.stump_height_m < 0:
            raise ConfigurationError("stump height must be >= 0")

    def for_species(self, species: Species) -> SpeciesAllometry:
        try:
            return self.species[species]
        except KeyError:  # pragma: no cover - blocked by __post_init__
            raise ConfigurationError(f"no allometry for species {species}") from None


@dataclass(frozen=True)
class DbhEstimate:
    dbh_cm: float
    extrapolated: bool


@dataclass(frozen=True)
class TaperFit:
    """Fitted power-taper parameters for one stem."""

    dbh_cm: float
    height_m: float
    exponent: float
    converged: bool
    fallback: bool
    dbh_extrapolated: bool


def smooth_diameters(diameters: np.ndarray) -> np.ndarray:
    """3-point running median; end points pass through unchanged.

    Damps single-sample sensor spikes before interpolation and fitting.
    """
    d = np.asarray(diameters, dtype=np.float64)
    if d.shape[0] < 3:
        return d.copy()
    out = d.copy()
    stacked = np.stack([d[:-2], d[1:-1], d[2:]])
    out[1:-1] = np.median(stacked, axis=0)
    return out


def taper_is_physical(profile: StemProfile, tolerance_cm: float = 0.2) -> bool:
    """True when the smoothed profile never widens by more than the
    tolerance from one measurement to the next."""
    s = smooth_diameters(profile.diameters_cm)
    return bool((np.diff(s) <= tolerance_cm).all())


def estimate_dbh(profile: StemProfile) -> DbhEstimate:
    """Breast-height diameter from the smoothed profile.

    Interpolates linearly between the two measurements bracketing 1.3 m.
    Profiles starting above 1.3 m (but not above 2.0 m) extrapolate from
    their lowest two measurements and are flagged; profiles entirely
    below 1.3 m extrapolate from their top two measurements likewise.
    """
    if profile.base_height_m > MAX_PROFILE_START_M:
        raise ReconstructionError(
            f"tree {profile.tree_id}: profile starts at {profile.base_height_m} m, "
            f"above the {MAX_PROFILE_START_M} m reconstruction limit"
        )
    heights = profile.heights_m
    smoothed = smooth_diameters(profile.diameters_cm)
    if heights.shape[0] == 1:
        return DbhEstimate(float(smoothed[0]), extrapolated=True)

    if heights[0] <= BREAST_HEIGHT_M <= heights[-1]:
        dbh = float(np.interp(BREAST_HEIGHT_M, heights, smoothed))
        return DbhEstimate(dbh, extrapolated=False)

    if heights[0] > BREAST_HEIGHT_M:
        h0, h1 = heights[0], heights[1]
        d0, d1 = smoothed[0], smoothed[1]
    else:
        h0, h1 = heights[-2], heights[-1]
        d0, d1 = smoothed[-2], smoothed[-1]
    slope = (d1 - d0) / (h1 - h0)
    return DbhEstimate(float(d0 + slope * (BREAST_HEIGHT_M - h0)), extrapolated=True)


def _taper_diameter(h, dbh_cm, height_m, exponent):
    return dbh_cm * ((height_m - h) / (height_m - BREAST_HEIGHT_M)) ** exponent


def _gauss_newton_taper(
    heights: np.ndarray,
    diameters: np.ndarray,
    dbh_cm: float,
    h_start: float,
    k_start: float,
    max_iterations: int = 100,
    step_tolerance: float = 1e-10,
) -> tuple[float, float, bool]:
    """Damped Gauss-Newton over (H, k) with D fixed.

    Returns (H, k, converged).  H is kept strictly above both the top
    measurement and breast height; k is boxed to [0.05, 5].
    """
    h_floor = max(float(heights[-1]), BREAST_HEIGHT_M) + 0.05
    H = max(h_start, h_floor + 0.05)
    k = min(max(k_start, 0.05), 5.0)

    def sse(H_, k_):
        r = diameters - _taper_diameter(heights, dbh_cm, H_, k_)
        return float(r @ r)

    current = sse(H, k)
    converged = False
    for _ in range(max_iterations):
        u = (H - heights) / (H - BREAST_HEIGHT_M)
        model = dbh_cm * u**k
        resid = diameters - model
        # d model / dH and d model / dk
        j_h = dbh_cm * k * u ** (k - 1.0) * (heights - BREAST_HEIGHT_M) / (H - BREAST_HEIGHT_M) ** 2
        j_k = model * np.log(u)
        a11 = float(j_h @ j_h)
        a12 = float(j_h @ j_k)
        a22 = float(j_k @ j_k)
        b1 = float(j_h @ resid)
        b2 = float(j_k @ resid)
        det = a11 * a22 - a12 * a12
        if not math.isfinite(det) or abs(det) < 1e-300:
            return H, k, False
        dH = (a22 * b1 - a12 * b2) / det
        dk = (a11 * b2 - a12 * b1) / det

        step = 1.0
        improved = False
        for _ in range(30):
            H_new = min(max(H + step * dH, h_floor), 200.0)
            k_new = min(max(k + step * dk, 0.05), 5.0)
            candidate = sse(H_new, k_new)
            if candidate < current:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = current < math.inf
            break
        moved = max(abs(H_new - H), abs(k_new - k))
        H, k, current = H_new, k_new, candidate
        if moved < step_tolerance:
            converged = True
            break
    else:
        converged = False
    return H, k, converged


def estimate_height(
    profile: StemProfile,
    allometry: AllometryConfig | None = None,
    fallback_tip_slope: float = FALLBACK_TIP_SLOPE_M_PER_CM,
) -> TaperFit:
    """Total tree height via nonlinear taper fit.

    Fits d(h) = D * ((H - h) / (H - 1.3))**k over (H, k) with D fixed at
    the interpolated DBH.  Start values: k from the species taper prior,
    H from the two-point cone solution through (1.3, D) and the top
    measurement.  Profiles with fewer than five measurements, or fits
    that fail to converge, fall back to
    H = top height + top diameter * fallback_tip_slope and are flagged.
    """
    allometry = allometry or AllometryConfig()
    prior = allometry.for_species(profile.species).taper_exponent_prior
    dbh = estimate_dbh(profile)
    heights = profile.heights_m
    smoothed = smooth_diameters(profile.diameters_cm)

    def fallback() -> TaperFit:
        return TaperFit(
            dbh_cm=dbh.dbh_cm,
            height_m=profile.top_height_m + float(smoothed[-1]) * fallback_tip_slope,
            exponent=prior,
            converged=False,
            fallback=True,
            dbh_extrapolated=dbh.extrapolated,
        )

    if heights.shape[0] < MIN_MEASUREMENTS_FOR_FIT:
        return fallback()

    top_d = float(smoothed[-1])
    top_h = float(heights[-1])
    ratio = top_d / dbh.dbh_cm
    if 0.0 < ratio < 0.999 and top_h > BREAST_HEIGHT_M:
        # prior-exponent taper through (1.3, D) and the top measurement
        u = ratio ** (1.0 / prior)
        h_start = (top_h - BREAST_HEIGHT_M * u) / (1.0 - u)
    else:
        h_start = top_h + 5.0

    H, k, converged = _gauss_newton_taper(heights, smoothed, dbh.dbh_cm, h_start, prior)
    if not converged:
        return fallback()
    return TaperFit(
        dbh_cm=dbh.dbh_cm,
        height_m=H,
        exponent=k,
        converged=True,
        fallback=False,
        dbh_extrapolated=dbh.extrapolated,
    )


def tree_volume(fit: TaperFit, stump_height_m: float = DEFAULT_STUMP_HEIGHT_M) -> float:
    """Total stem volume (m3) above the stump from the fitted taper.

    Closed form of (pi/4) * integral of d(h)^2 dh for the power taper:
    the integrand is proportional to u^(2k) with u linear in h, so the
    integral is (H - 1.3) / (2k + 1) * u(s)^(2k + 1).
    """
    if stump_height_m < 0:
        raise ReconstructionError("stump height must be >= 0")
    H, k = fit.height_m, fit.exponent
    if H <= stump_height_m:
        return 0.0
    d_m = fit.dbh_cm / 100.0
    span = H - BREAST_HEIGHT_M
    u_stump = (H - stump_height_m) / span
    return math.pi / 4.0 * d_m**2 * span / (2.0 * k + 1.0) * u_stump ** (2.0 * k + 1.0)


def tree_agb(
    dbh_cm: float, height_m: float, species: Species, allometry: AllometryConfig | None = None
) -> float:
    """Above-ground biomass (kg) from the configured power form."""
    if not (dbh_cm > 0 and height_m > 0):
        raise ReconstructionError("dbh and height must be positive")
    allometry = allometry or AllometryConfig()
    p = allometry.for_species(species)
    return p.biomass_a * dbh_cm**p.biomass_b * height_m**p.biomass_c


def jitter_positions(
    profiles: list[StemProfile],
    amplitude_m: float = DEFAULT_JITTER_AMPLITUDE_M,
    seed: int = 0,
) -> list[StemProfile]:
    """Displace machine-positioned trees by seeded uniform offsets.

    Each machine-positioned tree gets independent offsets drawn
    uniformly from [-amplitude, +amplitude] on both axes; boom-positioned
    trees are untouched.  Draws are consumed in input order for machine
    trees only, so the result is reproducible for a fixed seed.
    """
    if amplitude_m < 0:
        raise ReconstructionError("jitter amplitude must be >= 0")
    rng = np.random.default_rng(seed)
    out: list[StemProfile] = []
    for profile in profiles:
        if profile.positioning_mode is PositioningMode.MACHINE:
            dx, dy = rng.uniform(-amplitude_m, amplitude_m, size=2)
            out.append(replace(profile, x=profile.x + dx, y=profile.y + dy))
        else:
            out.append(profile)
    return out


def reconstruct_tree(
    profile: StemProfile, allometry: AllometryConfig | None = None
) -> tuple[TreeRecord, TaperFit]:
    """Full reconstruction of one harvested tree: DBH, height, volume, AGB."""
    allometry = allometry or AllometryConfig()
    fit = estimate_height(profile, allometry)
    volume = tree_volume(fit, allometry.stump_height_m)
    agb = tree_agb(fit.dbh_cm, fit.height_m, profile.species, allometry)
    record = TreeRecord(
        id=profile.tree_id,
        species=profile.species,
        dbh_cm=fit.dbh_cm,
        height_m=fit.height_m,
        volume_m3=volume,
        agb_kg=agb,
        x=profile.x,
        y=profile.y,
        source=TreeSource.HARVESTER,
    )
    return record, fit


# ---------------------------------------------------------------------------
# file parsing
# ---------------------------------------------------------------------------

HARVESTER_HEADER_PREFIX = [
    "tree_id",
    "species",
    "x",
    "y",
    "positioning_mode",
    "harvest_year",
    "base_height_m",
]


class HarvesterParseError(ValueError):
    pass


@dataclass(frozen=True)
class RowError:
    line_number: int
    message: str


@dataclass
class HarvesterParseResult:
    profiles: list[StemProfile]
    row_errors: list[RowError]


def _parse_mode(token: str) -> PositioningMode:
    try:
        return PositioningMode(token.strip().lower())
    except ValueError:
        raise ValueError(f"unknown positioning mode {token!r}") from None


def parse_harvester_file(path: str | Path) -> HarvesterParseResult:
    """Read a harvester production CSV into stem profiles.

    Schema: ``tree_id,species,x,y,positioning_mode,harvest_year,
    base_height_m,d1,d2,...`` with a variable number of trailing
    diameter columns in millimetres at 10 cm spacing.  Malformed rows go
    into the error report instead of being silently dropped; a missing
    or wrong header aborts with :class:`HarvesterParseError`.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise HarvesterParseError(f"{path}: empty file, header expected on line 1")
    header = [c.strip() for c in lines[0].split(",")]
    if header[: len(HARVESTER_HEADER_PREFIX)] != HARVESTER_HEADER_PREFIX:
        raise HarvesterParseError(
            f"{path}: line 1: header must start with {','.join(HARVESTER_HEADER_PREFIX)}"
        )

    profiles: list[StemProfile] = []
    errors: list[RowError] = []
    for line_number, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = [c.strip() for c in raw.split(",")]
        if len(cells) < len(HARVESTER_HEADER_PREFIX) + 1:
            errors.append(RowError(line_number, "too few columns: need at least one diameter"))
            continue
        try:
            diameters_mm = np.array([float(c) for c in cells[7:] if c != ""], dtype=np.float64)
            if diameters_mm.shape[0] == 0:
                raise ValueError("no diameter values")
            if (diameters_mm <= 0).any():
                raise ValueError("diameters must be positive")
            profile = StemProfile(
                tree_id=cells[0],
                species=parse_species(cells[1]),
                x=float(cells[2]),
                y=float(cells[3]),
                positioning_mode=_parse_mode(cells[4]),
                harvest_year=int(cells[5]),
                base_height_m=float(cells[6]),
                diameters_cm=diameters_mm / 10.0,
            )
        except (ValueError, ReconstructionError) as exc:
            errors.append(RowError(line_number, str(exc)))
            continue
        profiles.append(profile)
    return HarvesterParseResult(profiles=profiles, row_errors=errors)


def write_harvester_file(path: str | Path, profiles: list[StemProfile]) -> None:
    """Inverse of :func:`parse_harvester_file` (lossless for valid data)."""
    width = max((p.diameters_cm.shape[0] for p in profiles), default=1)
    header = HARVESTER_HEADER_PREFIX + [f"d{i + 1}" for i in range(width)]
    rows = [",".join(header)]
    for p in profiles:
        cells = [
            p.tree_id,
            p.species.value,
            repr(float(p.x)),
            repr(float(p.y)),
            p.positioning_mode.value,
            str(p.harvest_year),
            repr(float(p.base_height_m)),
        ]
        cells.extend(repr(float(d * 10.0)) for d in p.diameters_cm)
        rows.append(",".join(cells))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
