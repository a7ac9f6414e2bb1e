"""OLS attribute models, the time-lag sign rule, and prediction evaluation.

Models regress a plot attribute on laser metrics (plus the growing-
season lag between laser acquisition and field measurement).  The lag
predictor is only kept when its fitted coefficient carries the expected
sign; otherwise the model is automatically refit without it.  Fitted
models serialize to JSON and round-trip bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .metrics import MetricsVector
from .trees import ATTRIBUTE_NAMES, Dataset, Maturity, Species

METRIC_NAMES = ("hmean", "hvar", "h10", "h25", "h50", "h75", "h95", "d2", "time_diff")
RANK_TOLERANCE = 1e-10
TIME_DIFF = "time_diff"
POOLED_MATURITY_LABEL = "M2-M5"


class FitError(ValueError):
    pass


class PredictionError(ValueError):
    pass


class TimeDiffSign(Enum):
    POSITIVE = 1
    NEGATIVE = -1


@dataclass(frozen=True)
class ModelSpec:
    """Response, ordered predictors and the expected sign of the lag term."""

    response: str
    predictors: tuple[str, ...]
    use_time_diff: bool = False
    expected_time_diff_sign: TimeDiffSign = TimeDiffSign.POSITIVE

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.response not in ATTRIBUTE_NAMES:
            raise FitError(f"unknown response {self.response!r}; expected one of {ATTRIBUTE_NAMES}")
        if not self.predictors:
            raise FitError("predictor list must not be empty")
        unknown = [p for p in self.predictors if p not in METRIC_NAMES]
        if unknown:
            raise FitError(f"unknown predictors {unknown}; expected metric names {METRIC_NAMES}")
        if len(set(self.predictors)) != len(self.predictors):
            raise FitError(f"duplicate predictors in {self.predictors}")
        if self.response in self.predictors:
            raise FitError("response cannot be one of its own predictors")
        if self.use_time_diff != (TIME_DIFF in self.predictors):
            raise FitError("use_time_diff must match the presence of time_diff in predictors")


def default_model_specs() -> dict[str, ModelSpec]:
    """The stock predictor sets for the six attributes."""
    return {
        "HL": ModelSpec("HL", ("h95", "hmean", TIME_DIFF), use_time_diff=True),
        "V": ModelSpec("V", ("hmean", TIME_DIFF, "d2"), use_time_diff=True),
        "N": ModelSpec("N", ("hmean", "d2")),
        "AGB": ModelSpec("AGB", ("hmean", "d2", TIME_DIFF), use_time_diff=True),
        "G": ModelSpec("G", ("hmean", "d2", TIME_DIFF), use_time_diff=True),
        "QMD": ModelSpec("QMD", ("hmean", "d2", "h95")),
    }


@dataclass(frozen=True)
class FittedModel:
    spec: ModelSpec
    intercept: float
    coefficients: dict[str, float]
    se: dict[str, float]
    p_values: dict[str, float]
    n: int
    rmse_train: float
    rmse_pct_train: float
    r2_train: float
    time_diff_dropped: bool = False

    def __post_init__(self):
        if tuple(self.coefficients) != self.effective_predictors:
            raise FitError("coefficient keys must match the effective predictors in order")
        if self.n <= len(self.effective_predictors) + 1:
            raise FitError(
                f"need n > p + 1 observations, got n={self.n}, "
                f"p={len(self.effective_predictors)}"
            )
        for key, p in self.p_values.items():
            if not 0.0 <= p <= 1.0:
                raise FitError(f"p-value for {key} outside [0, 1]: {p}")

    @property
    def effective_predictors(self) -> tuple[str, ...]:
        """Spec predictors minus time_diff when the sign rule dropped it."""
        if self.time_diff_dropped:
            return tuple(p for p in self.spec.predictors if p != TIME_DIFF)
        return self.spec.predictors


def _metric_value(metrics: MetricsVector | Mapping[str, float], name: str) -> float:
    if isinstance(metrics, MetricsVector):
        mapping = metrics.as_dict()
    else:
        mapping = metrics
    try:
        value = float(mapping[name])
    except KeyError:
        raise PredictionError(f"predictor {name!r} missing from metrics") from None
    if math.isnan(value):
        raise PredictionError(f"predictor {name!r} is undefined (NaN)")
    return value


def _design_matrix(
    units: Sequence[tuple[Mapping[str, float] | MetricsVector, Mapping[str, float]]],
    spec: ModelSpec,
) -> tuple[np.ndarray, np.ndarray]:
    y = np.empty(len(units))
    X = np.empty((len(units), len(spec.predictors)))
    for i, (metrics, attributes) in enumerate(units):
        attr = attributes.as_dict() if hasattr(attributes, "as_dict") else attributes
        y[i] = float(attr[spec.response])
        for j, name in enumerate(spec.predictors):
            X[i, j] = _metric_value(metrics, name)
    if np.isnan(y).any():
        raise FitError(f"response {spec.response} contains undefined values")
    return y, X


def _lstsq_with_diagnostics(
    y: np.ndarray, X: np.ndarray, names: Sequence[str]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve min ||y - [1 X] beta|| via pivoted QR; returns
    (beta, se, p_values) with the intercept first."""
    n, p = X.shape
    if n <= p + 1:
        raise FitError(f"need n > p + 1 observations, got n={n}, p={p}")
    constant = [name for j, name in enumerate(names) if np.ptp(X[:, j]) == 0.0]
    if constant:
        raise FitError(
            f"predictor(s) {constant} are constant in the training data "
            "(collinear with the intercept)"
        )
    design = np.column_stack([np.ones(n), X])
    column_norms = np.linalg.norm(design, axis=0)
    tol = RANK_TOLERANCE * column_norms.max()

    q, r, pivot = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.count_nonzero(diag > tol))
    if rank < p + 1:
        labels = ["(intercept)"] + list(names)
        collinear = sorted(labels[i] for i in pivot[rank:])
        raise FitError(f"design matrix is rank deficient; collinear columns: {collinear}")

    beta_pivoted = scipy.linalg.solve_triangular(r, q.T @ y)
    beta = np.empty_like(beta_pivoted)
    beta[pivot] = beta_pivoted

    residuals = y - design @ beta
    dof = n - p - 1
    sigma2 = float(residuals @ residuals) / dof
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p + 1))
    cov_pivoted = sigma2 * (r_inv @ r_inv.T)
    se = np.empty(p + 1)
    se[pivot] = np.sqrt(np.diag(cov_pivoted))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = beta / se
    p_values = 2.0 * stats.t.sf(np.abs(t_stats), dof)
    # se == 0 with beta == 0 only on degenerate noiseless fits
    p_values = np.where(np.isnan(p_values), 1.0, p_values)
    return beta, se, p_values


def ols_fit(
    units: Sequence[tuple[Mapping[str, float] | MetricsVector, Mapping[str, float]]],
    spec: ModelSpec,
) -> FittedModel:
    """Fit the model and apply the time-lag sign rule.

    ``units`` pairs each training unit's metrics with its attribute
    values.  Coefficient standard errors come from sigma2 * (X'X)^-1,
    p-values from a two-sided t test on n - p - 1 degrees of freedom.
    A rank-deficient design names its collinear columns in the error.
    """
    y, X = _design_matrix(units, spec)
    beta, se, p_values = _lstsq_with_diagnostics(y, X, spec.predictors)

    fitted = X @ beta[1:] + beta[0]
    residuals = y - fitted
    n = y.shape[0]
    rmse_train = math.sqrt(float(residuals @ residuals) / n)
    y_mean = float(np.mean(y))
    sst = float(((y - y_mean) ** 2).sum())
    model = FittedModel(
        spec=spec,
        intercept=float(beta[0]),
        coefficients={name: float(b) for name, b in zip(spec.predictors, beta[1:])},
        se={"intercept": float(se[0]), **{n_: float(s) for n_, s in zip(spec.predictors, se[1:])}},
        p_values={
            "intercept": float(p_values[0]),
            **{n_: float(p_) for n_, p_ in zip(spec.predictors, p_values[1:])},
        },
        n=n,
        rmse_train=rmse_train,
        rmse_pct_train=100.0 * rmse_train / y_mean if y_mean != 0 else float("nan"),
        r2_train=1.0 - float(residuals @ residuals) / sst if sst > 0 else float("nan"),
    )
    return apply_time_diff_rule(model, units)


def apply_time_diff_rule(
    model: FittedModel,
    units: Sequence[tuple[Mapping[str, float] | MetricsVector, Mapping[str, float]]],
) -> FittedModel:
    """Drop the lag predictor when its coefficient sign is implausible.

    If the fitted time_diff coefficient disagrees with the expected sign,
    the model is refit without time_diff and flagged; otherwise it is
    returned unchanged.  Idempotent: an already-dropped model or one
    without the lag term passes straight through.
    """
    spec = model.spec
    if not spec.use_time_diff or model.time_diff_dropped or TIME_DIFF not in model.coefficients:
        return model
    coef = model.coefficients[TIME_DIFF]
    sign_ok = coef > 0 if spec.expected_time_diff_sign is TimeDiffSign.POSITIVE else coef < 0
    if sign_ok:
        return model
    reduced_spec = ModelSpec(
        response=spec.response,
        predictors=tuple(p for p in spec.predictors if p != TIME_DIFF),
        use_time_diff=False,
        expected_time_diff_sign=spec.expected_time_diff_sign,
    )
    refit = ols_fit(units, reduced_spec)
    return replace(refit, spec=spec, time_diff_dropped=True)


def predict(model: FittedModel, metrics: MetricsVector | Mapping[str, float]) -> float:
    """Linear prediction; negative values are preserved, not clamped."""
    total = model.intercept
    for name, coef in model.coefficients.items():
        total += coef * _metric_value(metrics, name)
    return total


# ---------------------------------------------------------------------------
# evaluation statistics
# ---------------------------------------------------------------------------


def _as_arrays(observed, predicted) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(observed, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("observed and predicted must have the same length")
    if y.shape[0] == 0:
        raise ValueError("need at least one observation")
    return y, yhat


def rmse(observed, predicted) -> float:
    y, yhat = _as_arrays(observed, predicted)
    return math.sqrt(float(((y - yhat) ** 2).mean()))


def me(observed, predicted) -> float:
    """Mean error, observed minus predicted: positive = underprediction."""
    y, yhat = _as_arrays(observed, predicted)
    return float((y - yhat).mean())


def rmse_pct(observed, predicted) -> float:
    y, _ = _as_arrays(observed, predicted)
    mean = float(y.mean())
    if mean == 0:
        return float("nan")
    return 100.0 * rmse(observed, predicted) / mean


def me_pct(observed, predicted) -> float:
    y, _ = _as_arrays(observed, predicted)
    mean = float(y.mean())
    if mean == 0:
        return float("nan")
    return 100.0 * me(observed, predicted) / mean


def r2_pred(observed, predicted) -> float:
    """1 - SSE/SST against the observed mean; negative on poor test fits,
    NaN when the observed values are constant."""
    y, yhat = _as_arrays(observed, predicted)
    if y.shape[0] < 2:
        raise ValueError("need at least two observations")
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0:
        return float("nan")
    sse = float(((y - yhat) ** 2).sum())
    return 1.0 - sse / sst


# ---------------------------------------------------------------------------
# stratified evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalPlot:
    """One test plot ready for evaluation against a fitted model."""

    metrics: Mapping[str, float] | MetricsVector
    y: float
    maturity: Maturity | None
    species: Species | None
    datasets: frozenset[Dataset]


@dataclass(frozen=True)
class StratumMetrics:
    dataset: str
    maturity: str
    species: str
    n: int
    rmse: float
    rmse_pct: float
    me: float
    me_pct: float
    r2_pred: float
    low_n: bool


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[StratumMetrics, ...]


def _stratum_row(
    dataset: str, maturity: str, species: str, y: np.ndarray, yhat: np.ndarray, min_n: int
) -> StratumMetrics:
    return StratumMetrics(
        dataset=dataset,
        maturity=maturity,
        species=species,
        n=int(y.shape[0]),
        rmse=rmse(y, yhat),
        rmse_pct=rmse_pct(y, yhat),
        me=me(y, yhat),
        me_pct=me_pct(y, yhat),
        r2_pred=r2_pred(y, yhat) if y.shape[0] >= 2 else float("nan"),
        low_n=y.shape[0] < min_n,
    )


def stratified_evaluate(
    plots: Sequence[EvalPlot], model: FittedModel, min_n: int = 10
) -> EvalReport:
    """Evaluation rows per dataset and maturity class plus pooled rows.

    Emits, for every dataset label present: one row per non-empty
    maturity class M2..M5, one pooled M2-M5 row, and one pooled row per
    dominant species.  Regeneration (M1) plots never enter any row.
    Strata below ``min_n`` plots are flagged low-n rather than dropped.
    """
    usable = [p for p in plots if p.maturity is not None and p.maturity != Maturity.M1]
    y_all = np.array([p.y for p in usable])
    yhat_all = np.array([predict(model, p.metrics) for p in usable])

    rows: list[StratumMetrics] = []
    for dataset in Dataset:
        in_ds = np.array([dataset in p.datasets for p in usable], dtype=bool)
        if not in_ds.any():
            continue
        for maturity in (Maturity.M2, Maturity.M3, Maturity.M4, Maturity.M5):
            sel = in_ds & np.array([p.maturity == maturity for p in usable], dtype=bool)
            if sel.any():
                rows.append(
                    _stratum_row(dataset.value, maturity.name, "", y_all[sel], yhat_all[sel], min_n)
                )
        rows.append(
            _stratum_row(
                dataset.value, POOLED_MATURITY_LABEL, "", y_all[in_ds], yhat_all[in_ds], min_n
            )
        )
        for species in Species:
            sel = in_ds & np.array([p.species == species for p in usable], dtype=bool)
            if sel.any():
                rows.append(
                    _stratum_row(
                        dataset.value,
                        POOLED_MATURITY_LABEL,
                        species.value,
                        y_all[sel],
                        yhat_all[sel],
                        min_n,
                    )
                )
    return EvalReport(rows=tuple(rows))
