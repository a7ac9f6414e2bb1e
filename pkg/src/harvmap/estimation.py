"""Large-area direct, synthetic-corrected and model-assisted estimators.

The direct estimator is the ratio-of-means over forest plots of a
probability sample; its variance assumes simple random sampling, which
is conservative under the systematic designs typical of national
inventories.  The model-assisted estimator adds a probability-sample
residual correction to a map-based synthetic estimate and is therefore
approximately design-unbiased even when the underlying model is badly
biased.  Relative efficiency compares the two variances.

All accumulations run in plot-id order with compensated summation so
estimates are bit-reproducible regardless of input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels


class EstimationError(ValueError):
    pass


class Estimator(Enum):
    DIRECT = "direct"
    MA = "ma"


@dataclass(frozen=True)
class SamplePlot:
    """One probability-sample plot.

    ``forest_indicator`` is 1 on forest land, 0 elsewhere; ``y`` (and
    ``y_hat`` for model-assisted estimation) must be present wherever
    the effective indicator is 1.  ``hl_defined`` marks forest plots
    with measured trees, the only ones usable for height estimation.
    """

    id: str
    y: float | None
    y_hat: float | None
    forest_indicator: int
    hl_defined: bool = True

    def __post_init__(self):
        if self.forest_indicator not in (0, 1):
            raise EstimationError(
                f"plot {self.id}: forest indicator must be 0 or 1, got {self.forest_indicator}"
            )


@dataclass(frozen=True)
class EstimateResult:
    estimator: Estimator
    mu_hat: float
    variance: float
    se: float
    two_se_pct: float
    n_s: int
    n_forest: int
    mu_syn: float | None = None
    mu_cor: float | None = None
    re: float | None = None

    def __post_init__(self):
        if self.variance < 0:
            raise EstimationError("variance must be >= 0")
        if not math.isclose(self.se, math.sqrt(self.variance), rel_tol=1e-12, abs_tol=1e-300):
            raise EstimationError("se must equal sqrt(variance)")
        if self.estimator is Estimator.MA:
            if self.mu_syn is None or self.mu_cor is None:
                raise EstimationError("model-assisted results carry mu_syn and mu_cor")
            if self.mu_hat != self.mu_syn + self.mu_cor:
                raise EstimationError("mu_hat must equal mu_syn + mu_cor exactly")

    @property
    def mu_cor_pct(self) -> float | None:
        """Correction as a percentage of the point estimate (MA only)."""
        if self.mu_cor is None:
            return None
        if self.mu_hat == 0:
            return float("nan")
        return 100.0 * self.mu_cor / self.mu_hat


def _ordered(sample: Iterable[SamplePlot]) -> list[SamplePlot]:
    return sorted(sample, key=lambda p: p.id)


def _effective_indicator(plot: SamplePlot, hl_only: bool) -> int:
    if hl_only:
        return plot.forest_indicator if plot.hl_defined else 0
    return plot.forest_indicator


def srs_variance(z: np.ndarray | Sequence[float], n_s: int, n_forest: int) -> float:
    """Simple-random-sampling variance of a ratio-of-means estimate.

    ``z`` holds the indicator-masked deviations; the estimate variance is
    (n_s / n_forest)^2 / (n_s (n_s - 1)) * sum(z^2).
    """
    if n_s < 2:
        raise EstimationError(f"variance needs a sample of at least 2 plots, got {n_s}")
    if n_forest < 1:
        raise EstimationError("variance needs at least one forest plot")
    z = np.ascontiguousarray(z, dtype=np.float64)
    sum_sq = _kernels.kahan_sum(z * z)
    ratio = n_forest / n_s
    return (1.0 / ratio**2) * sum_sq / (n_s * (n_s - 1))


def standard_error(variance: float) -> float:
    if variance < 0:
        raise EstimationError(f"variance must be >= 0, got {variance}")
    return math.sqrt(variance)


def two_se_pct(se: float, mu_hat: float) -> float:
    """2 x SE as a percentage of the estimate; NaN for a zero estimate."""
    if mu_hat == 0:
        return float("nan")
    return 200.0 * se / mu_hat


def direct_estimate(sample: Iterable[SamplePlot], hl_only: bool = False) -> EstimateResult:
    """Field-data-only mean estimate over forest land.

    ``hl_only`` restricts the forest indicator to plots with measured
    trees (required for the non-additive height attribute).
    """
    plots = _ordered(sample)
    n_s = len(plots)
    indicators = [_effective_indicator(p, hl_only) for p in plots]
    n_forest = sum(indicators)
    if n_forest < 1:
        raise EstimationError("no forest plots in the sample")
    if n_s < 2:
        raise EstimationError("need a sample of at least 2 plots")

    y = np.zeros(n_s)
    for i, (plot, ind) in enumerate(zip(plots, indicators)):
        if ind:
            if plot.y is None:
                raise EstimationError(f"plot {plot.id}: forest plot lacks an observation")
            y[i] = plot.y
    ind_arr = np.array(indicators, dtype=np.float64)
    mu_hat = _kernels.kahan_sum(y * ind_arr) / n_forest
    z = (y - mu_hat) * ind_arr
    variance = srs_variance(z, n_s, n_forest)
    se = standard_error(variance)
    return EstimateResult(
        estimator=Estimator.DIRECT,
        mu_hat=mu_hat,
        variance=variance,
        se=se,
        two_se_pct=two_se_pct(se, mu_hat),
        n_s=n_s,
        n_forest=n_forest,
    )


def ma_estimate(
    sample: Iterable[SamplePlot], mu_syn: float, hl_only: bool = False
) -> EstimateResult:
    """Model-assisted estimate: synthetic map mean plus residual correction.

    ``mu_syn`` is supplied by the caller (population mean prediction over
    forest units); the correction is the sample mean residual over forest
    plots, and the variance uses the centered residuals in place of the
    centered observations.
    """
    plots = _ordered(sample)
    n_s = len(plots)
    indicators = [_effective_indicator(p, hl_only) for p in plots]
    n_forest = sum(indicators)
    if n_forest < 1:
        raise EstimationError("no forest plots in the sample")
    if n_s < 2:
        raise EstimationError("need a sample of at least 2 plots")

    residuals = np.zeros(n_s)
    for i, (plot, ind) in enumerate(zip(plots, indicators)):
        if ind:
            if plot.y is None or plot.y_hat is None:
                raise EstimationError(
                    f"plot {plot.id}: forest plot lacks an observation or prediction"
                )
            residuals[i] = plot.y - plot.y_hat
    ind_arr = np.array(indicators, dtype=np.float64)
    mu_cor = _kernels.kahan_sum(residuals * ind_arr) / n_forest
    z = (residuals - mu_cor) * ind_arr
    variance = srs_variance(z, n_s, n_forest)
    se = standard_error(variance)
    mu_hat = mu_syn + mu_cor
    return EstimateResult(
        estimator=Estimator.MA,
        mu_hat=mu_hat,
        variance=variance,
        se=se,
        two_se_pct=two_se_pct(se, mu_hat),
        n_s=n_s,
        n_forest=n_forest,
        mu_syn=mu_syn,
        mu_cor=mu_cor,
    )


def relative_efficiency(var_direct: float, var_ma: float) -> float:
    """Variance ratio direct/MA; > 1 means the model helps.

    A zero MA variance (perfect model) reports infinity.
    """
    if var_direct < 0 or var_ma < 0:
        raise EstimationError("variances must be >= 0")
    if var_ma == 0:
        return math.inf
    return var_direct / var_ma


def equivalent_sample_size(n_s: int, re: float) -> int:
    """Direct-estimation sample size matching the MA variance."""
    if n_s < 1:
        raise EstimationError(f"sample size must be >= 1, got {n_s}")
    if not re > 0:
        raise EstimationError(f"relative efficiency must be positive, got {re}")
    return int(round(n_s * re))
