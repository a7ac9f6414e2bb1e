"""Synthetic populations and Monte Carlo verification of the estimators.

The simulator builds a spatially autocorrelated stand grid in which each
stand serves as both a map unit and a potential sample plot. Each
attribute field is smoothed seeded noise tied to a shared latent
"development" field; maturity classes follow the height quantiles, so a
harvester-style selection rule (mature, productive stands only) yields a
training set that is genuinely unrepresentative of the population.

Surrogate laser metrics are affine functions of the true attributes plus
noise.  Slope multipliers per maturity class make the attribute-metric
relationship drift across development stages, which is what turns the
training-set selection into systematic prediction error in young stands.

Replicated sampling then measures, per attribute: bias of the synthetic
(map mean) estimate, bias and variance of the direct and model-assisted
estimates, confidence-interval coverage and relative efficiency.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .estimation import (
    EstimateResult,
    SamplePlot,
    direct_estimate,
    ma_estimate,
    relative_efficiency,
)
from .regression import FitError, ModelSpec, ols_fit
from .trees import ATTRIBUTE_NAMES, Maturity

MIN_GRID_SIDE = 20


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeField:
    """Target mean and spread of one simulated attribute field."""

    mean: float
    sd: float

    def __post_init__(self):
        if self.sd < 0:
            raise SimulationError("field sd must be >= 0")


@dataclass(frozen=True)
class MetricChannel:
    """Affine attribute-to-metric link with optional per-maturity slopes."""

    metric: str
    intercept: float
    slope: float
    noise_sd: float
    slope_multipliers: Mapping[Maturity, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.noise_sd < 0:
            raise SimulationError("metric noise sd must be >= 0")
        object.__setattr__(self, "slope_multipliers", dict(self.slope_multipliers))

    def multiplier(self, maturity: int) -> float:
        return self.slope_multipliers.get(Maturity(maturity), 1.0)


def default_attribute_fields() -> dict[str, AttributeField]:
    return {
        "HL": AttributeField(13.0, 3.5),
        "V": AttributeField(150.0, 55.0),
        "N": AttributeField(1100.0, 320.0),
        "AGB": AttributeField(80.0, 28.0),
        "G": AttributeField(22.0, 7.0),
        "QMD": AttributeField(16.0, 4.0),
    }


def default_metric_channels() -> dict[str, MetricChannel]:
    """Strong height signal, weak count signal, the rest in between."""
    return {
        "HL": MetricChannel("h95", 0.5, 1.05, 0.9),
        "V": MetricChannel("hmean", 1.0, 0.060, 2.2),
        "N": MetricChannel("d2", 0.15, 0.00030, 0.125),
        "AGB": MetricChannel("h25", 0.8, 0.080, 1.6),
        "G": MetricChannel("h50", 0.5, 0.35, 1.7),
        "QMD": MetricChannel("h75", 1.0, 0.55, 1.8),
    }


@dataclass(frozen=True)
class PopulationConfig:
    nx: int = 40
    ny: int = 40
    smoothing_radius: int = 3
    latent_weight: float = 0.7
    forest_fraction: float = 0.9
    maturity_quantiles: tuple[float, float, float] = (0.20, 0.45, 0.70)
    attributes: Mapping[str, AttributeField] = field(default_factory=default_attribute_fields)
    channels: Mapping[str, MetricChannel] = field(default_factory=default_metric_channels)
    master_seed: int = 7

    def __post_init__(self):
        if self.nx < MIN_GRID_SIDE or self.ny < MIN_GRID_SIDE:
            raise SimulationError(f"grid must be at least {MIN_GRID_SIDE}x{MIN_GRID_SIDE}")
        if self.smoothing_radius < 0:
            raise SimulationError("smoothing radius must be >= 0")
        if not 0.0 <= self.latent_weight <= 1.0:
            raise SimulationError("latent weight must lie in [0, 1]")
        if not 0.0 < self.forest_fraction <= 1.0:
            raise SimulationError("forest fraction must lie in (0, 1]")
        q = self.maturity_quantiles
        if len(q) != 3 or not all(0.0 < a < 1.0 for a in q) or list(q) != sorted(q):
            raise SimulationError("maturity quantiles must be three ascending values in (0, 1)")
        object.__setattr__(self, "attributes", dict(self.attributes))
        object.__setattr__(self, "channels", dict(self.channels))
        if set(self.attributes) != set(ATTRIBUTE_NAMES):
            raise SimulationError(f"attribute fields must cover exactly {ATTRIBUTE_NAMES}")
        if set(self.channels) != set(ATTRIBUTE_NAMES):
            raise SimulationError(f"metric channels must cover exactly {ATTRIBUTE_NAMES}")
        metric_names = [c.metric for c in self.channels.values()]
        if len(set(metric_names)) != len(metric_names):
            raise SimulationError("metric channels must use distinct metric names")

    @property
    def size(self) -> int:
        return self.nx * self.ny


@dataclass(frozen=True)
class SelectionRule:
    """Which stands a harvester would plausibly train on."""

    eligible_maturities: frozenset = frozenset({Maturity.M4, Maturity.M5})
    min_productivity: float = 0.0
    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise SimulationError("sampling fraction must lie in (0, 1]")
        object.__setattr__(self, "eligible_maturities", frozenset(self.eligible_maturities))


@dataclass(frozen=True)
class SystematicDesign:
    k: int
    """Every k-th stand in row-major order from a seeded random start."""

    def __post_init__(self):
        if self.k < 1:
            raise SimulationError("systematic interval k must be >= 1")


@dataclass(frozen=True)
class SRSDesign:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise SimulationError("SRS sample size must be >= 2")


@dataclass(frozen=True)
class Population:
    config: PopulationConfig
    ids: tuple[str, ...]
    attributes: dict[str, np.ndarray]
    metrics: dict[str, np.ndarray]
    maturity: np.ndarray
    productivity: np.ndarray
    is_forest: np.ndarray
    hl_defined: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)

    def attribute_mask(self, name: str) -> np.ndarray:
        """Forest stands on which the attribute mean is defined."""
        if name == "HL":
            return self.is_forest & self.hl_defined
        return self.is_forest

    def true_means(self) -> dict[str, float]:
        out = {}
        for name in ATTRIBUTE_NAMES:
            mask = self.attribute_mask(name)
            values = self.attributes[name][mask]
            out[name] = _kernels.kahan_sum(values) / values.shape[0]
        return out

    def unit_metrics(self, index: int) -> dict[str, float]:
        return {m: float(v[index]) for m, v in self.metrics.items()}

    def unit_attributes(self, index: int) -> dict[str, float]:
        return {a: float(v[index]) for a, v in self.attributes.items()}


def box_smooth(plane: np.ndarray, radius: int) -> np.ndarray:
    """Moving-average smoothing with an edge-truncated square window."""
    if radius <= 0:
        return plane.copy()
    ny, nx = plane.shape
    integral = np.zeros((ny + 1, nx + 1))
    integral[1:, 1:] = plane.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(ny)
    xs = np.arange(nx)
    y0 = np.clip(ys - radius, 0, ny)
    y1 = np.clip(ys + radius + 1, 0, ny)
    x0 = np.clip(xs - radius, 0, nx)
    x1 = np.clip(xs + radius + 1, 0, nx)
    sums = (
        integral[np.ix_(y1, x1)]
        - integral[np.ix_(y0, x1)]
        - integral[np.ix_(y1, x0)]
        + integral[np.ix_(y0, x0)]
    )
    counts = np.outer(y1 - y0, x1 - x0)
    return sums / counts


def moran_lag1(plane: np.ndarray) -> float:
    """Moran-style lag-1 spatial autocorrelation with rook adjacency."""
    centered = plane - plane.mean()
    num = (centered[:, :-1] * centered[:, 1:]).sum() + (centered[:-1, :] * centered[1:, :]).sum()
    pairs = centered[:, :-1].size + centered[:-1, :].size
    den = (centered**2).mean() * pairs
    if den == 0:
        return 0.0
    return float(num / den)


def _standardized_smooth_field(rng: np.random.Generator, config: PopulationConfig) -> np.ndarray:
    plane = box_smooth(rng.standard_normal((config.ny, config.nx)), config.smoothing_radius)
    sd = plane.std()
    if sd == 0:
        return np.zeros(config.size)
    return ((plane - plane.mean()) / sd).ravel()


def generate_population(config: PopulationConfig) -> Population:
    """Deterministic population for a given config (seed included)."""
    root = np.random.SeedSequence(config.master_seed)
    streams = root.spawn(3 + 2 * len(ATTRIBUTE_NAMES))
    latent_rng = np.random.default_rng(streams[0])
    forest_rng = np.random.default_rng(streams[1])
    productivity_rng = np.random.default_rng(streams[2])
    attr_rngs = {
        name: np.random.default_rng(streams[3 + i]) for i, name in enumerate(ATTRIBUTE_NAMES)
    }
    noise_rngs = {
        name: np.random.default_rng(streams[3 + len(ATTRIBUTE_NAMES) + i])
        for i, name in enumerate(ATTRIBUTE_NAMES)
    }

    latent = _standardized_smooth_field(latent_rng, config)
    w = config.latent_weight
    attributes: dict[str, np.ndarray] = {}
    for name in ATTRIBUTE_NAMES:
        spec = config.attributes[name]
        own = _standardized_smooth_field(attr_rngs[name], config)
        fluctuation = w * latent + math.sqrt(max(0.0, 1.0 - w * w)) * own
        attributes[name] = np.maximum(spec.mean + spec.sd * fluctuation, 0.0)

    hl = attributes["HL"]
    thresholds = np.quantile(hl, config.maturity_quantiles)
    maturity = np.full(config.size, int(Maturity.M2), dtype=np.int64)
    maturity[hl >= thresholds[0]] = int(Maturity.M3)
    maturity[hl >= thresholds[1]] = int(Maturity.M4)
    maturity[hl >= thresholds[2]] = int(Maturity.M5)

    prod_field = _standardized_smooth_field(productivity_rng, config)
    order = np.argsort(prod_field, kind="stable")
    ranks = np.empty(config.size, dtype=np.float64)
    ranks[order] = np.arange(config.size)
    productivity = (ranks + 0.5) / config.size

    forest_field = _standardized_smooth_field(forest_rng, config)
    cut = np.quantile(forest_field, 1.0 - config.forest_fraction)
    is_forest = forest_field >= cut

    metrics: dict[str, np.ndarray] = {}
    for name in ATTRIBUTE_NAMES:
        channel = config.channels[name]
        mult = np.array([channel.multiplier(m) for m in maturity])
        noise = noise_rngs[name].standard_normal(config.size) * channel.noise_sd
        metrics[channel.metric] = channel.intercept + channel.slope * mult * attributes[name] + noise

    return Population(
        config=config,
        ids=tuple(f"s{i:05d}" for i in range(config.size)),
        attributes=attributes,
        metrics=metrics,
        maturity=maturity,
        productivity=productivity,
        is_forest=is_forest,
        hl_defined=is_forest & (attributes["N"] > 1.0),
    )


def select_harvester_training(
    population: Population, rule: SelectionRule, seed
) -> np.ndarray:
    """Seeded subsample of the stands a harvester would visit."""
    eligible_mask = (
        population.is_forest
        & np.isin(population.maturity, [int(m) for m in rule.eligible_maturities])
        & (population.productivity >= rule.min_productivity)
    )
    eligible = np.flatnonzero(eligible_mask)
    if eligible.size == 0:
        raise SimulationError("selection rule admits no stands")
    count = max(2, int(round(rule.fraction * eligible.size)))
    count = min(count, eligible.size)
    if count == eligible.size:
        return eligible
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(eligible, size=count, replace=False))


def draw_sample(
    population: Population, design: SystematicDesign | SRSDesign, seed
) -> np.ndarray:
    """Probability sample of stand indices under the given design."""
    rng = np.random.default_rng(seed)
    if isinstance(design, SystematicDesign):
        start = int(rng.integers(design.k))
        return np.arange(start, population.size, design.k)
    if isinstance(design, SRSDesign):
        if design.n > population.size:
            raise SimulationError("SRS sample size exceeds the population size")
        return np.sort(rng.choice(population.size, size=design.n, replace=False))
    raise SimulationError(f"unknown design {design!r}")


def simulation_model_specs(config: PopulationConfig) -> dict[str, ModelSpec]:
    """One single-channel model per attribute."""
    return {
        name: ModelSpec(name, (config.channels[name].metric,), use_time_diff=False)
        for name in ATTRIBUTE_NAMES
    }


@dataclass(frozen=True)
class ReplicateAttribute:
    truth: float
    direct: EstimateResult
    ma: EstimateResult
    re: float
    covered_direct: bool
    covered_ma: bool
    me_pct_by_maturity: dict[str, float]


@dataclass(frozen=True)
class ReplicateResult:
    replicate_id: int
    attributes: dict[str, ReplicateAttribute]


@dataclass(frozen=True)
class SimulationResult:
    replicates: tuple[ReplicateResult, ...]
    summary: dict[str, dict[str, float | dict[str, float]]]
    n_failed: int


def _replicate_seed(master_seed: int, replicate_id: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=(master_seed, stream, replicate_id))


def _fit_and_predict(
    population: Population,
    train_idx: np.ndarray,
    specs: Mapping[str, ModelSpec],
) -> dict[str, np.ndarray]:
    """OLS per attribute on the training stands, predictions everywhere."""
    units = [
        (population.unit_metrics(i), population.unit_attributes(i)) for i in train_idx
    ]
    predictions: dict[str, np.ndarray] = {}
    for name, spec in specs.items():
        model = ols_fit(units, spec)
        yhat = np.full(population.size, model.intercept)
        for predictor, coef in model.coefficients.items():
            yhat = yhat + coef * population.metrics[predictor]
        predictions[name] = yhat
    return predictions


def _population_me_pct(
    population: Population, name: str, predictions: np.ndarray
) -> dict[str, float]:
    """Population-level relative mean error per maturity class."""
    out: dict[str, float] = {}
    base = population.attribute_mask(name)
    y = population.attributes[name]
    for maturity in (Maturity.M2, Maturity.M3, Maturity.M4, Maturity.M5):
        mask = base & (population.maturity == int(maturity))
        if not mask.any():
            continue
        mean_y = float(y[mask].mean())
        if mean_y == 0:
            continue
        out[maturity.name] = 100.0 * float((y[mask] - predictions[mask]).mean()) / mean_y
    return out


def run_replicate(
    population: Population,
    rule: SelectionRule,
    design: SystematicDesign | SRSDesign,
    replicate_id: int,
    specs: Mapping[str, ModelSpec],
    truths: Mapping[str, float],
    master_seed: int,
) -> ReplicateResult:
    """One full train/predict/sample/estimate pass."""
    train_idx = select_harvester_training(
        population, rule, _replicate_seed(master_seed, replicate_id, stream=1)
    )
    predictions = _fit_and_predict(population, train_idx, specs)
    sample_idx = draw_sample(
        population, design, _replicate_seed(master_seed, replicate_id, stream=2)
    )

    per_attribute: dict[str, ReplicateAttribute] = {}
    for name in ATTRIBUTE_NAMES:
        hl_only = name == "HL"
        yhat = predictions[name]
        y = population.attributes[name]
        plots = [
            SamplePlot(
                id=population.ids[i],
                y=float(y[i]),
                y_hat=float(yhat[i]),
                forest_indicator=int(population.is_forest[i]),
                hl_defined=bool(population.hl_defined[i]),
            )
            for i in sample_idx
        ]
        syn_mask = population.attribute_mask(name)
        mu_syn = _kernels.kahan_sum(yhat[syn_mask]) / int(syn_mask.sum())
        direct = direct_estimate(plots, hl_only=hl_only)
        ma = ma_estimate(plots, mu_syn, hl_only=hl_only)
        truth = truths[name]
        per_attribute[name] = ReplicateAttribute(
            truth=truth,
            direct=direct,
            ma=ma,
            re=relative_efficiency(direct.variance, ma.variance),
            covered_direct=abs(direct.mu_hat - truth) <= 2.0 * direct.se,
            covered_ma=abs(ma.mu_hat - truth) <= 2.0 * ma.se,
            me_pct_by_maturity=_population_me_pct(population, name, yhat),
        )
    return ReplicateResult(replicate_id=replicate_id, attributes=per_attribute)


def _mean(values: list[float]) -> float:
    return _kernels.kahan_sum(np.asarray(values, dtype=np.float64)) / len(values)


def _sample_var(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    arr = np.asarray(values, dtype=np.float64)
    mean = _kernels.kahan_sum(arr) / arr.shape[0]
    return _kernels.kahan_sum((arr - mean) ** 2) / (arr.shape[0] - 1)


def summarize(replicates: Sequence[ReplicateResult]) -> dict:
    """Cross-replicate means, biases, MC standard errors, coverage and RE."""
    summary: dict[str, dict] = {}
    ordered = sorted(replicates, key=lambda r: r.replicate_id)
    n = len(ordered)
    if n == 0:
        return summary
    for name in ATTRIBUTE_NAMES:
        rows = [r.attributes[name] for r in ordered]
        truth = rows[0].truth
        direct_mu = [r.direct.mu_hat for r in rows]
        syn_mu = [r.ma.mu_syn for r in rows]
        ma_mu = [r.ma.mu_hat for r in rows]
        finite_re = [r.re for r in rows if math.isfinite(r.re)]
        me_keys = sorted({k for r in rows for k in r.me_pct_by_maturity})
        summary[name] = {
            "truth": truth,
            "n_replicates": n,
            "mean_direct": _mean(direct_mu),
            "bias_direct": _mean(direct_mu) - truth,
            "mc_se_direct": math.sqrt(_sample_var(direct_mu) / n),
            "mean_syn": _mean(syn_mu),
            "bias_syn": _mean(syn_mu) - truth,
            "mc_se_syn": math.sqrt(_sample_var(syn_mu) / n),
            "mean_ma": _mean(ma_mu),
            "bias_ma": _mean(ma_mu) - truth,
            "mc_se_ma": math.sqrt(_sample_var(ma_mu) / n),
            "empirical_var_direct": _sample_var(direct_mu),
            "mean_est_var_direct": _mean([r.direct.variance for r in rows]),
            "empirical_var_ma": _sample_var(ma_mu),
            "mean_est_var_ma": _mean([r.ma.variance for r in rows]),
            "coverage_direct": _mean([float(r.covered_direct) for r in rows]),
            "coverage_ma": _mean([float(r.covered_ma) for r in rows]),
            "mean_re": _mean(finite_re) if finite_re else float("inf"),
            "mean_me_pct_by_maturity": {
                k: _mean([r.me_pct_by_maturity[k] for r in rows if k in r.me_pct_by_maturity])
                for k in me_keys
            },
        }
    return summary


def run_replicates(
    config: PopulationConfig,
    rule: SelectionRule,
    design: SystematicDesign | SRSDesign,
    n_replicates: int,
    threads: int = 1,
    specs: Mapping[str, ModelSpec] | None = None,
) -> SimulationResult:
    """Replicated estimation experiment on one generated population.

    The population is built once from the config seed; every replicate
    re-draws the harvester training set and the probability sample from
    streams derived deterministically from the master seed and the
    replicate id, so results are reproducible and independent of thread
    count and completion order.  Replicates whose model fit fails are
    counted and skipped.
    """
    if n_replicates < 2:
        raise SimulationError("need at least 2 replicates")
    population = generate_population(config)
    truths = population.true_means()
    specs = dict(specs) if specs is not None else simulation_model_specs(config)

    def worker(replicate_id: int) -> ReplicateResult | None:
        try:
            return run_replicate(
                population, rule, design, replicate_id, specs, truths, config.master_seed
            )
        except (FitError, SimulationError):
            return None

    results: list[ReplicateResult | None]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(worker, range(n_replicates)))
    else:
        results = [worker(i) for i in range(n_replicates)]

    completed = tuple(sorted((r for r in results if r is not None), key=lambda r: r.replicate_id))
    return SimulationResult(
        replicates=completed,
        summary=summarize(completed),
        n_failed=n_replicates - len(completed),
    )
