"""Acceptance suite: one test per release criterion, each at its stated
tolerance, printing one PASS line per criterion (run with -s to see them).
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.spatial import ConvexHull
from shapely.geometry import box

from harvmap import _kernels
from harvmap import io as hio
from harvmap.cli import main as cli_main
from harvmap.estimation import SamplePlot, direct_estimate, ma_estimate, srs_variance
from harvmap.geometry import HarvestedSegment, alpha_shape, tessellate
from harvmap.harvester import estimate_height, tree_volume
from harvmap.metrics import EchoArray, compute_metrics
from harvmap.regression import FittedModel, ModelSpec, ols_fit, predict
from harvmap.simulation import (
    PopulationConfig,
    SelectionRule,
    SRSDesign,
    SystematicDesign,
    generate_population,
    run_replicates,
)
from harvmap.trees import ATTRIBUTE_NAMES

from conftest import build_echoes, build_harvester_site, build_plots, build_terrain
from test_harvester import power_taper_profile

BH = 1.3


def report(number: int, name: str) -> None:
    print(f"ACCEPTANCE {number:02d} {name}: PASS")


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    """Compile the JIT kernels before any timed assertion."""
    z = np.array([1.0, 2.0, 3.0])
    _kernels.kahan_sum(z)
    _kernels.mean_var(z)
    _kernels.percentiles_sorted(z, np.array([0.5]))
    _kernels.count_above(z, 1.5)
    _kernels.in_circle(z, z, 0.0, 0.0, 10.0)
    _kernels.bilinear(np.ones((2, 2)), 0.0, 0.0, 1.0, -9999.0, z, z)


# -- 1 -----------------------------------------------------------------------


def brute_direct(y, ind):
    n_s, n_f = len(y), sum(ind)
    mu = sum(a * b for a, b in zip(y, ind)) / n_f
    z = [(a - mu) * b for a, b in zip(y, ind)]
    var = (n_s / n_f) ** 2 * sum(v * v for v in z) / (n_s * (n_s - 1))
    return mu, var


def brute_ma(y, yhat, ind, mu_syn):
    n_s, n_f = len(y), sum(ind)
    e = [(a - p) * b for a, p, b in zip(y, yhat, ind)]
    cor = sum(e) / n_f
    z = [(a - p - cor) * b for a, p, b in zip(y, yhat, ind)]
    var = (n_s / n_f) ** 2 * sum(v * v for v in z) / (n_s * (n_s - 1))
    return mu_syn + cor, cor, var


def test_01_estimator_brute_force_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(2, 21))
        y = rng.uniform(-50, 400, n)
        yhat = y + rng.normal(0, 20, n)
        ind = rng.integers(0, 2, n)
        if ind.sum() == 0:
            ind[int(rng.integers(n))] = 1
        mu_syn = float(rng.uniform(0, 200))
        plots = [
            SamplePlot(f"p{i:02d}", float(y[i]), float(yhat[i]), int(ind[i]))
            for i in range(n)
        ]
        bd_mu, bd_var = brute_direct(list(y), list(ind))
        d = direct_estimate(plots)
        assert d.mu_hat == pytest.approx(bd_mu, rel=1e-12)
        assert d.variance == pytest.approx(bd_var, rel=1e-12)
        z = (y - d.mu_hat) * ind
        assert srs_variance(z, n, int(ind.sum())) == pytest.approx(bd_var, rel=1e-12)
        bm_mu, bm_cor, bm_var = brute_ma(list(y), list(yhat), list(ind), mu_syn)
        m = ma_estimate(plots, mu_syn)
        assert m.mu_hat == pytest.approx(bm_mu, rel=1e-12)
        assert m.mu_cor == pytest.approx(bm_cor, rel=1e-12, abs=1e-12)
        assert m.variance == pytest.approx(bm_var, rel=1e-12)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"estimator oracle sweep took {elapsed:.2f} s"
    report(1, "estimator oracle equivalence")


# -- 2 -----------------------------------------------------------------------


def test_02_census_exactness():
    pop = generate_population(PopulationConfig(master_seed=31))
    truths = pop.true_means()
    for name in ATTRIBUTE_NAMES:
        hl_only = name == "HL"
        plots = [
            SamplePlot(
                pop.ids[i],
                float(pop.attributes[name][i]),
                float(pop.attributes[name][i]),  # perfect model
                int(pop.is_forest[i]),
                bool(pop.hl_defined[i]),
            )
            for i in range(pop.size)
        ]
        d = direct_estimate(plots, hl_only=hl_only)
        assert d.mu_hat == pytest.approx(truths[name], rel=1e-12)
        m = ma_estimate(plots, mu_syn=truths[name], hl_only=hl_only)
        assert m.variance == 0.0
        assert m.mu_hat == pytest.approx(truths[name], rel=1e-12)
    report(2, "census exactness and perfect-model MA variance")


# -- 3 and 4 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def treatment_srs_1000():
    cfg = PopulationConfig(master_seed=7)
    return run_replicates(cfg, SelectionRule(), SRSDesign(n=250), 1000)


def test_03_ma_unbiased_synthetic_biased(treatment_srs_1000):
    start = time.perf_counter()
    summary = treatment_srs_1000.summary
    assert treatment_srs_1000.n_failed == 0
    for name in ATTRIBUTE_NAMES:
        s = summary[name]
        assert abs(s["bias_ma"]) < 2.0 * s["mc_se_ma"], (
            f"{name}: MA bias {s['bias_ma']:.4f} exceeds 2 MC-SE {s['mc_se_ma']:.4f}"
        )
    for name in ("N", "HL"):
        s = summary[name]
        assert abs(s["bias_syn"]) > 3.0 * s["mc_se_syn"], (
            f"{name}: synthetic bias not detectable under selection"
        )
    assert time.perf_counter() - start < 300.0
    report(3, "MA unbiasedness under a deliberately biased model")


def test_04_conservative_coverage_systematic():
    cfg = PopulationConfig(master_seed=7)
    result = run_replicates(cfg, SelectionRule(), SystematicDesign(k=7), 1000)
    assert result.n_failed == 0
    for name in ATTRIBUTE_NAMES:
        s = result.summary[name]
        assert s["coverage_direct"] >= 0.93, f"{name}: direct coverage {s['coverage_direct']}"
        assert s["coverage_ma"] >= 0.93, f"{name}: MA coverage {s['coverage_ma']}"
    report(4, "conservative 2SE coverage under systematic sampling")


# -- 5 and 6 -----------------------------------------------------------------


@pytest.fixture(scope="module")
def twenty_batches():
    results = []
    for batch in range(20):
        cfg = PopulationConfig(master_seed=1000 + batch)
        results.append(run_replicates(cfg, SelectionRule(), SRSDesign(n=250), 100))
    return results


def test_05_relative_efficiency_ordering(twenty_batches):
    wins = 0
    for result in twenty_batches:
        re_hl = result.summary["HL"]["mean_re"]
        re_n = result.summary["N"]["mean_re"]
        assert re_hl > 1.0 and re_n > 1.0
        if re_hl > re_n:
            wins += 1
    assert wins >= 18, f"height RE beat count RE in only {wins}/20 batches"
    report(5, "relative-efficiency ordering (height vs stem count)")


def test_06_stratum_mean_error_pattern(twenty_batches):
    wins = 0
    for result in twenty_batches:
        me_by_class = result.summary["N"]["mean_me_pct_by_maturity"]
        if abs(me_by_class["M2"]) > abs(me_by_class["M5"]):
            wins += 1
    assert wins >= 18, f"young-stand error dominated in only {wins}/20 batches"
    report(6, "young-stand mean-error dominance for stem count")


# -- 7 -----------------------------------------------------------------------


def test_07_height_model_prediction_arithmetic():
    spec = ModelSpec("HL", ("h95", "hmean", "time_diff"), use_time_diff=True)
    model = FittedModel(
        spec=spec,
        intercept=3.77,
        coefficients={"h95": 0.77, "hmean": -0.04, "time_diff": 0.19},
        se={"intercept": 0.17, "h95": 0.01, "hmean": 0.02, "time_diff": 0.01},
        p_values={"intercept": 0.0, "h95": 0.0, "hmean": 0.016, "time_diff": 0.0},
        n=1608,
        rmse_train=1.13,
        rmse_pct_train=6.75,
        r2_train=0.85,
    )
    value = predict(model, {"h95": 20.0, "hmean": 15.0, "time_diff": 5.0})
    assert value == pytest.approx(19.52, abs=1e-9)
    report(7, "published-coefficient prediction arithmetic")


# -- 8 -----------------------------------------------------------------------


def mpmath_ols_reference(y, X):
    """Normal-equations OLS at 50 significant digits."""
    from mpmath import mp, mpf, matrix

    mp.dps = 50
    n, p = X.shape
    design = matrix(n, p + 1)
    for i in range(n):
        design[i, 0] = mpf(1)
        for j in range(p):
            design[i, j + 1] = mpf(X[i, j])
    response = matrix([mpf(v) for v in y])
    gram = design.T * design
    beta = mp.lu_solve(gram, design.T * response)
    residuals = response - design * beta
    sse = sum(r * r for r in residuals)
    dof = n - p - 1
    sigma2 = sse / dof
    gram_inv = gram**-1
    se = [mp.sqrt(sigma2 * gram_inv[j, j]) for j in range(p + 1)]
    p_values = []
    for j in range(p + 1):
        t = beta[j] / se[j]
        x = mpf(dof) / (dof + t * t)
        p_values.append(mp.betainc(mpf(dof) / 2, mpf(1) / 2, 0, x, regularized=True))
    return (
        [float(b) for b in beta],
        [float(s) for s in se],
        [float(q) for q in p_values],
    )


def test_08_ols_against_high_precision_reference():
    # noiseless recovery
    hmean = np.arange(12, dtype=float)
    y_exact = 4.25 - 1.5 * hmean
    model = ols_fit(
        [({"hmean": float(h)}, {"V": float(v)}) for h, v in zip(hmean, y_exact)],
        ModelSpec("V", ("hmean",)),
    )
    assert model.intercept == pytest.approx(4.25, abs=1e-10)
    assert model.coefficients["hmean"] == pytest.approx(-1.5, abs=1e-10)

    # 30 x 4 fixture vs 50-digit reference
    rng = np.random.default_rng(88)
    X = np.column_stack(
        [
            rng.uniform(5, 25, 30),
            rng.uniform(0, 9, 30),
            rng.uniform(0, 1, 30),
            rng.uniform(10, 30, 30),
        ]
    )
    y = 7.0 + X @ np.array([2.0, 1.1, -14.0, 0.3]) + rng.normal(0, 4.0, 30)
    names = ("hmean", "time_diff", "d2", "h95")
    units = [
        ({k: float(X[i, j]) for j, k in enumerate(names)}, {"V": float(y[i])})
        for i in range(30)
    ]
    model = ols_fit(units, ModelSpec("V", names, use_time_diff=True))
    ref_beta, ref_se, ref_p = mpmath_ols_reference(y, X)
    got_beta = [model.intercept] + [model.coefficients[k] for k in names]
    got_se = [model.se["intercept"]] + [model.se[k] for k in names]
    got_p = [model.p_values["intercept"]] + [model.p_values[k] for k in names]
    np.testing.assert_allclose(got_beta, ref_beta, rtol=1e-8)
    np.testing.assert_allclose(got_se, ref_se, rtol=1e-8)
    np.testing.assert_allclose(got_p, ref_p, rtol=1e-8, atol=1e-12)

    # sign rule: drops exactly when the fitted sign contradicts expectation
    td = rng.integers(2, 9, 200).astype(float)
    base = rng.uniform(5, 25, 200)
    for sign, dropped in ((+1.0, False), (-1.0, True)):
        yy = 3.0 + 2.0 * base + sign * 1.5 * td + rng.normal(0, 0.5, 200)
        units = [
            ({"hmean": float(base[i]), "time_diff": float(td[i])}, {"V": float(yy[i])})
            for i in range(200)
        ]
        fitted = ols_fit(units, ModelSpec("V", ("hmean", "time_diff"), use_time_diff=True))
        assert fitted.time_diff_dropped is dropped
        assert ("time_diff" in fitted.coefficients) is (not dropped)
    report(8, "OLS coefficients, SEs and p-values vs 50-digit reference")


# -- 9 -----------------------------------------------------------------------


def test_09_geometry_oracles():
    # alpha shape of a convex cloud = convex hull
    rng = np.random.default_rng(14)
    points = rng.uniform(0, 120, size=(80, 2))
    polygons = alpha_shape(points, alpha=1e9)
    hull_area = ConvexHull(points).volume
    assert len(polygons) == 1
    assert polygons[0].area == pytest.approx(hull_area, rel=1e-9)

    # partition property on an irregular polygon
    from shapely.geometry import Polygon

    segment = HarvestedSegment("s", Polygon([(3, 1), (95, 7), (120, 60), (40, 88), (-10, 45)]))
    cells = tessellate(segment)
    total = sum(c.coverage_fraction for c in cells) * 1024.0
    assert total == pytest.approx(segment.area_m2, rel=1e-6)

    # hand-enumerated acceptance sets on three fixtures
    fixtures = [
        (box(0, 0, 64, 64), {(0, 0), (0, 1), (1, 0), (1, 1)}),
        (box(0, 0, 48, 32), {(0, 0)}),
        (box(0, 0, 80, 60), {(0, 0), (0, 1), (1, 0), (1, 1)}),
    ]
    for polygon, expected in fixtures:
        cells = tessellate(HarvestedSegment("f", polygon))
        accepted = {(c.ix, c.iy) for c in cells if c.accepted}
        assert accepted == expected
    report(9, "alpha-shape, tessellation partition and 80 percent rule")


# -- 10 ----------------------------------------------------------------------


def test_10_stem_reconstruction_self_consistency():
    rng = np.random.default_rng(77)
    worst_dbh = worst_h = worst_vol = 0.0
    for index in range(500):
        height = float(rng.uniform(10, 35))
        exponent = float(rng.uniform(0.6, 1.2))
        dbh = float(rng.uniform(0.9, 1.4)) * height
        noise = rng.uniform(-0.04, 0.04, size=600)  # max 0.4 mm, in cm
        profile = power_taper_profile(
            dbh=dbh, height=height, exponent=exponent, noise=noise,
            min_coverage=0.72, tree_id=f"s{index}"
        )
        fit = estimate_height(profile)
        assert fit.converged, f"profile {index} failed to converge"
        dbh_err = abs(fit.dbh_cm - dbh)
        h_err = abs(fit.height_m - height) / height
        volume = tree_volume(fit, stump_height_m=0.0)
        true_volume = (
            math.pi / 4 * (dbh / 100.0) ** 2 * (height - BH) / (2 * exponent + 1)
            * (height / (height - BH)) ** (2 * exponent + 1)
        )
        vol_err = abs(volume - true_volume) / true_volume
        assert dbh_err <= 0.05, f"profile {index}: dbh error {dbh_err:.4f} cm"
        assert h_err <= 0.02, f"profile {index}: height error {100 * h_err:.2f} %"
        assert vol_err <= 0.03, f"profile {index}: volume error {100 * vol_err:.2f} %"
        worst_dbh = max(worst_dbh, dbh_err)
        worst_h = max(worst_h, h_err)
        worst_vol = max(worst_vol, vol_err)
    print(
        f"  (worst errors: dbh {worst_dbh:.4f} cm, height {100 * worst_h:.3f} %, "
        f"volume {100 * worst_vol:.3f} %)"
    )
    report(10, "stem reconstruction within stated tolerances on 500 profiles")


# -- 11 ----------------------------------------------------------------------


def echoes_from_z(z):
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    return EchoArray(
        x=np.zeros(n), y=np.zeros(n), z=z,
        return_number=np.ones(n, dtype=np.int64),
        num_returns=np.ones(n, dtype=np.int64),
        classification=np.ones(n, dtype=np.int64),
    )


def test_11_metric_brute_force_and_fuzz():
    rng = np.random.default_rng(55)
    # brute force on 500 random echo sets
    for _ in range(500):
        n = int(rng.integers(1, 200))
        z = rng.uniform(0, 40, n) * float(rng.choice([1e-3, 1.0, 1e3]))
        m = compute_metrics(echoes_from_z(z), 2019, 2012)
        ordered = np.sort(z)
        for frac, got in zip(
            (0.10, 0.25, 0.50, 0.75, 0.95), (m.h10, m.h25, m.h50, m.h75, m.h95)
        ):
            rank = (n - 1) * frac
            lo, hi = math.floor(rank), math.ceil(rank)
            want = ordered[lo] + (rank - lo) * (ordered[hi] - ordered[lo])
            assert got == pytest.approx(want, rel=1e-12, abs=1e-300)
        assert m.hmean == pytest.approx(float(np.mean(z)), rel=1e-12)
        if n > 1:
            assert m.hvar == pytest.approx(float(np.var(z, ddof=1)), rel=1e-10, abs=1e-300)
        assert m.d2 == pytest.approx(float(np.count_nonzero(z > 2.0)) / n, rel=1e-15)

    # 10^4-case fuzz: monotone percentiles, d2 in [0, 1] (validated on
    # construction by MetricsVector, so surviving construction is the check)
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        scale = float(rng.choice([1e-9, 1e-3, 1.0, 1e4, 1e12]))
        kind = rng.integers(3)
        if kind == 0:
            z = rng.uniform(0, 30, n) * scale
        elif kind == 1:
            z = np.repeat(rng.uniform(0, 30) * scale, n)
        else:
            z = rng.choice([0.0, 2.0, 2.0 + 1e-15, 30.0 * scale], size=n)
        m = compute_metrics(echoes_from_z(z), 2018, 2015)
        assert m.h10 <= m.h25 <= m.h50 <= m.h75 <= m.h95
        assert 0.0 <= m.d2 <= 1.0
        assert m.hvar >= 0.0
    report(11, "metric oracles and 10k-case property fuzz")


# -- 12 ----------------------------------------------------------------------


def _snapshot(out_dir):
    return {
        p.name: p.read_bytes() for p in sorted(out_dir.iterdir()) if p.is_file()
    }


def test_12_cli_byte_determinism(tmp_path):
    work = tmp_path / "inputs"
    work.mkdir()
    terrain = work / "terrain.asc"
    echoes = work / "echoes.csv"
    plots = work / "plots.csv"
    trees = work / "trees.csv"
    harvester = work / "harvester.csv"
    build_terrain(terrain)
    build_echoes(echoes)
    build_plots(plots, trees)
    build_harvester_site(harvester, n_side=30, spacing=6.0)
    estimation_csv = work / "est.csv"
    estimation_csv.write_text(
        "plot_id,y,y_hat,forest_indicator,hl_defined\n"
        + "".join(f"p{i:02d},{10 + 3 * i}.0,{9 + 3 * i}.5,1,1\n" for i in range(12))
    )

    configs = {
        "metrics": {
            "echoes": str(echoes),
            "terrain": str(terrain),
            "units": str(plots),
            "acquisition_year": 2012,
        },
        "cells": {"harvester_file": str(harvester), "seed": 9},
        "estimate": {"input": str(estimation_csv), "attribute": "V", "mu_syn": 30.0},
        "simulate": {"replicates": 8, "design": {"type": "srs", "n": 150}, "seed": 5},
    }

    snapshots = {}
    for command, payload in configs.items():
        config_path = work / f"{command}.json"
        config_path.write_text(json.dumps(payload))
        for run, threads in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp_path / f"{command}_{run}"
            code = cli_main(
                [command, "--config", str(config_path), "--out", str(out),
                 "--threads", str(threads)]
            )
            assert code == 0
            snapshots[(command, run)] = _snapshot(out)
        assert snapshots[(command, "a")] == snapshots[(command, "b")], command
        assert snapshots[(command, "a")] == snapshots[(command, "c")], command

    # fit and evaluate run on artifacts produced above
    cells_dir = tmp_path / "cells_a"
    metrics_cfg = work / "cell_metrics.json"
    metrics_cfg.write_text(
        json.dumps(
            {
                "echoes": str(echoes),
                "terrain": str(terrain),
                "units": str(plots),
                "acquisition_year": 2012,
            }
        )
    )
    plot_metrics = tmp_path / "metrics_a" / "metrics.csv"
    fit_cfg = work / "fit.json"
    # train on the NFI plots themselves: enough units for a 1-predictor model
    fit_payload = {
        "cells": str(cells_dir / "cells.csv"),
        "metrics": str(tmp_path / "site_metrics_a" / "metrics.csv"),
        "responses": ["V"],
        "models": {"V": {"predictors": ["hmean"]}},
    }
    site_echoes = work / "site_echoes.csv"
    rng = np.random.default_rng(10)
    n = 20000
    xs = rng.uniform(190, 390, n)
    ys = rng.uniform(190, 390, n)
    zs = 100.0 + 12.0 + 0.05 * (xs - 190) + rng.normal(0, 0.8, n)
    hio.write_echo_csv(
        site_echoes,
        EchoArray(
            x=xs, y=ys, z=zs,
            return_number=np.ones(n, dtype=np.int64),
            num_returns=np.ones(n, dtype=np.int64),
            classification=np.ones(n, dtype=np.int64),
        ),
    )
    from harvmap.metrics import TerrainRaster

    big_terrain = work / "terrain_big.asc"
    hio.write_esri_ascii(
        big_terrain,
        TerrainRaster(xll=150.0, yll=150.0, cell_size=2.0, nodata=-9999.0,
                      grid=np.full((130, 130), 100.0)),
    )
    site_metrics_cfg = work / "site_metrics.json"
    site_metrics_cfg.write_text(
        json.dumps(
            {
                "echoes": str(site_echoes),
                "terrain": str(big_terrain),
                "units": str(cells_dir / "cell_units.csv"),
                "acquisition_year": 2014,
            }
        )
    )
    eval_cfg = work / "eval.json"
    eval_payload = {
        "plots": str(plots),
        "trees": str(trees),
        "metrics": str(plot_metrics),
        "models": [str(tmp_path / "fit_a" / "model_V.json")],
    }
    eval_cfg.write_text(json.dumps(eval_payload))
    fit_cfg.write_text(json.dumps(fit_payload))

    for command, cfg in (
        ("site_metrics", site_metrics_cfg),
        ("fit", fit_cfg),
        ("evaluate", eval_cfg),
    ):
        actual = "metrics" if command == "site_metrics" else command
        for run, threads in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp_path / f"{command}_{run}"
            code = cli_main(
                [actual, "--config", str(cfg), "--out", str(out), "--threads", str(threads)]
            )
            assert code == 0
            snapshots[(command, run)] = _snapshot(out)
        assert snapshots[(command, "a")] == snapshots[(command, "b")], command
        assert snapshots[(command, "a")] == snapshots[(command, "c")], command
    report(12, "byte-identical CLI outputs across reruns and thread counts")
