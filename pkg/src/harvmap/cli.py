"""Command-line front end for the four-step workflow.

Subcommands mirror the pipeline: ``metrics`` (normalize, clip and
summarize laser echoes per unit), ``cells`` (harvester file to harvested
grid cells with attributes), ``fit`` (OLS attribute models), ``evaluate``
(stratified test-set evaluation with plots), ``estimate`` (large-area
direct and model-assisted estimates) and ``simulate`` (Monte Carlo
estimator-property experiments).

Every command reads an optional JSON config (``--config``), applies CLI
flag overrides (``--seed``, ``--threads``, ``--out``), writes the fully
resolved config next to its outputs for provenance, and exits 0 on
success, 2 on a validation problem (bad config, missing inputs) and 3 on
a processing failure.  Errors are also emitted as one-line JSON on
stderr.  Outputs are byte-identical across reruns with the same config
and seed at any ``--threads`` setting.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as hio
from . import svgplot
from .estimation import EstimationError, direct_estimate, ma_estimate, relative_efficiency
from .geometry import (
    DEFAULT_ALPHA_M,
    DEFAULT_CELL_SIZE_M,
    DEFAULT_COVERAGE_THRESHOLD,
    GeometryError,
    HarvestedSegment,
    alpha_shape,
    cell_index_of,
    tessellate,
)
from .harvester import (
    AllometryConfig,
    DEFAULT_JITTER_AMPLITUDE_M,
    DEFAULT_STUMP_HEIGHT_M,
    HarvesterParseError,
    ReconstructionError,
    SpeciesAllometry,
    jitter_positions,
    parse_harvester_file,
    reconstruct_tree,
)
from .metrics import D2_THRESHOLD_M, MetricsError, clip, compute_metrics, normalize_heights, percentiles
from .regression import (
    EvalPlot,
    FitError,
    ModelSpec,
    PredictionError,
    TimeDiffSign,
    default_model_specs,
    ols_fit,
    predict,
    stratified_evaluate,
)
from .simulation import (
    AttributeField,
    MetricChannel,
    PopulationConfig,
    SelectionRule,
    SimulationError,
    SRSDesign,
    SystematicDesign,
    run_replicates,
)
from .trees import (
    ATTRIBUTE_NAMES,
    DomainError,
    Maturity,
    Species,
    classify_plots,
    compute_attributes,
    dominant_species,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PROCESSING = 3

DEFAULT_PERCENTILES = [10, 25, 50, 75, 95]

PROCESSING_ERRORS = (
    HarvesterParseError,
    ReconstructionError,
    GeometryError,
    MetricsError,
    FitError,
    PredictionError,
    EstimationError,
    SimulationError,
    DomainError,
    hio.FormatError,
)


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

# key, default (None = required), help text
CONFIG_KEYS: dict[str, list[tuple[str, object, str]]] = {
    "metrics": [
        ("echoes", None, "echo file, CSV or FEM1 binary"),
        ("terrain", None, "terrain model, ESRI ASCII grid"),
        ("units", None, "unit descriptor CSV (plot schema)"),
        ("acquisition_year", None, "laser acquisition year for the time_diff predictor"),
        ("d2_threshold_m", D2_THRESHOLD_M, "canopy threshold for the d2 density metric"),
        ("percentiles", DEFAULT_PERCENTILES, "height percentiles to report"),
    ],
    "cells": [
        ("harvester_file", None, "harvester production CSV"),
        ("alpha_m", DEFAULT_ALPHA_M, "alpha-shape circumradius filter for delineation"),
        ("cell_size_m", DEFAULT_CELL_SIZE_M, "tessellation cell side (1024 m2 cells)"),
        ("coverage_threshold", DEFAULT_COVERAGE_THRESHOLD, "minimum inside-segment area fraction"),
        ("jitter_amplitude_m", DEFAULT_JITTER_AMPLITUDE_M, "uniform position jitter for machine-positioned trees"),
        ("stump_height_m", DEFAULT_STUMP_HEIGHT_M, "lower bound of stem volume integration"),
        ("allometry", {}, "per-species overrides {species: {a, b, c, taper_exponent_prior}}"),
        ("seed", 0, "jitter random seed"),
    ],
    "fit": [
        ("cells", None, "grid-cell attribute CSV (training units)"),
        ("metrics", None, "metrics CSV for the same units"),
        ("responses", list(ATTRIBUTE_NAMES), "attributes to fit"),
        ("models", {}, "per-attribute overrides {attr: {predictors, use_time_diff, expected_time_diff_sign}}"),
    ],
    "evaluate": [
        ("plots", None, "plot descriptor CSV"),
        ("trees", None, "plot tree CSV"),
        ("metrics", None, "metrics CSV for the plots"),
        ("models", None, "list of fitted model JSON paths"),
        ("min_stratum_n", 10, "below this plot count a stratum is flagged low-n"),
    ],
    "estimate": [
        ("input", None, "estimation CSV (plot_id, y, y_hat, forest_indicator, hl_defined)"),
        ("attribute", "V", "attribute label for the output file"),
        ("mu_syn", "", "synthetic (map mean) estimate; empty skips the model-assisted step"),
        ("hl_only", "", "restrict to plots with measured trees; defaults to attribute == HL"),
    ],
    "simulate": [
        ("population", {}, "population overrides (nx, ny, smoothing_radius, attributes, channels, ...)"),
        ("selection", {}, "training selection rule overrides (eligible_maturities, fraction, ...)"),
        ("design", {"type": "srs", "n": 250}, "sampling design: {type: srs, n} or {type: systematic, k}"),
        ("replicates", 200, "number of Monte Carlo replicates"),
        ("seed", 7, "master seed"),
    ],
}

COMMAND_HELP = {
    "metrics": "normalize echoes against the terrain, clip to units, write the metrics table",
    "cells": "parse a harvester file, reconstruct trees, delineate and tessellate harvested cells",
    "fit": "fit OLS attribute models on harvested-cell training data",
    "evaluate": "stratified evaluation of fitted models on independent plots",
    "estimate": "large-area direct and model-assisted estimates from a plot sample",
    "simulate": "Monte Carlo estimator-property experiment on a synthetic population",
}


def _config_epilog(command: str) -> str:
    lines = ["config keys (JSON object; flags override):"]
    for key, default, text in CONFIG_KEYS[command]:
        shown = "required" if default is None else f"default {json.dumps(default)}"
        lines.append(f"  {key:<22} {text} [{shown}]")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harvmap",
        description="forest attribute modeling and large-area estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, help_text in COMMAND_HELP.items():
        p = sub.add_parser(
            command,
            help=help_text,
            epilog=_config_epilog(command),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker thread cap")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config file, then CLI flag overrides."""
    resolved = {key: default for key, default, _ in CONFIG_KEYS[command]}
    if args.config is not None:
        if not args.config.exists():
            raise ValidationError(f"config file not found: {args.config}")
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    if args.seed is not None and "seed" in resolved:
        resolved["seed"] = args.seed
    resolved["threads"] = max(1, args.threads)
    missing = [k for k, v in resolved.items() if v is None]
    if missing:
        raise ValidationError(f"missing required config keys: {missing}")
    return resolved


def _require_file(config: dict, key: str) -> Path:
    path = Path(str(config[key]))
    if not path.exists():
        raise ValidationError(f"{key}: file not found: {path}")
    return path


def _write_resolved_config(out_dir: Path, command: str, config: dict) -> None:
    # threads steers execution only, never results; keep it out of provenance
    recorded = {k: v for k, v in config.items() if k != "threads"}
    payload = json.dumps(recorded, indent=2, sort_keys=True, default=str) + "\n"
    (out_dir / f"{command}_resolved_config.json").write_text(payload, encoding="utf-8")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def cmd_metrics(config: dict, out_dir: Path) -> None:
    echo_path = _require_file(config, "echoes")
    terrain_path = _require_file(config, "terrain")
    units_path = _require_file(config, "units")
    acquisition_year = int(config["acquisition_year"])
    d2_threshold = float(config["d2_threshold_m"])
    pct_list = [float(p) for p in config["percentiles"]]
    if any(not 0 < p < 100 for p in pct_list):
        raise ValidationError("percentiles must lie strictly between 0 and 100")

    echoes = hio.read_echoes(echo_path)
    terrain = hio.read_esri_ascii(terrain_path)
    units = hio.read_plot_csv(units_path)
    normalized, n_dropped = normalize_heights(echoes, terrain)

    def one_unit(unit):
        clipped = clip(normalized, unit.geometry)
        return unit.id, compute_metrics(
            clipped, unit.meas_year, acquisition_year, d2_threshold
        ), clipped

    if config["threads"] > 1:
        with ThreadPoolExecutor(max_workers=config["threads"]) as pool:
            results = list(pool.map(one_unit, units))
    else:
        results = [one_unit(u) for u in units]

    standard = pct_list == [float(p) for p in DEFAULT_PERCENTILES]
    if standard:
        hio.write_metrics_csv(out_dir / "metrics.csv", {uid: m for uid, m, _ in results})
    else:
        header = (
            ["unit_id", "hmean", "hvar"]
            + [f"h{p:g}" for p in pct_list]
            + ["d2", "time_diff", "n_first_echoes"]
        )
        with (out_dir / "metrics.csv").open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for uid, m, clipped in sorted(results, key=lambda r: r[0]):
                if not m.defined:
                    writer.writerow([uid] + [""] * (len(header) - 3) + [str(m.time_diff), "0"])
                    continue
                z = clipped.z[clipped.return_number == 1]
                pct = percentiles(z, np.array(pct_list) / 100.0)
                writer.writerow(
                    [uid, repr(m.hmean), repr(m.hvar)]
                    + [repr(float(v)) for v in pct]
                    + [repr(m.d2), str(m.time_diff), str(m.n_first_echoes)]
                )

    undefined = sum(1 for _, m, _ in results if not m.defined)
    _write_resolved_config(out_dir, "metrics", config)
    print(
        f"metrics: {len(results)} units, {undefined} without first echoes, "
        f"{n_dropped} echoes over nodata dropped"
    )


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def _allometry_from_config(overrides: dict, stump_height_m: float) -> AllometryConfig:
    base = AllometryConfig().species
    species_map = dict(base)
    for name, params in overrides.items():
        try:
            sp = Species(name.lower())
        except ValueError:
            raise ValidationError(f"allometry: unknown species {name!r}") from None
        current = base[sp]
        species_map[sp] = SpeciesAllometry(
            biomass_a=float(params.get("a", current.biomass_a)),
            biomass_b=float(params.get("b", current.biomass_b)),
            biomass_c=float(params.get("c", current.biomass_c)),
            taper_exponent_prior=float(
                params.get("taper_exponent_prior", current.taper_exponent_prior)
            ),
        )
    return AllometryConfig(species=species_map, stump_height_m=stump_height_m)


def cmd_cells(config: dict, out_dir: Path) -> None:
    harvester_path = _require_file(config, "harvester_file")
    alpha = float(config["alpha_m"])
    cell_size = float(config["cell_size_m"])
    threshold = float(config["coverage_threshold"])
    amplitude = float(config["jitter_amplitude_m"])
    if alpha <= 0 or cell_size <= 0:
        raise ValidationError("alpha_m and cell_size_m must be positive")
    if amplitude < 0:
        raise ValidationError("jitter_amplitude_m must be >= 0")
    allometry = _allometry_from_config(config["allometry"], float(config["stump_height_m"]))

    parsed = parse_harvester_file(harvester_path)
    if parsed.row_errors:
        with (out_dir / "parse_errors.csv").open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["line_number", "message"])
            for err in parsed.row_errors:
                writer.writerow([str(err.line_number), err.message])
    profiles = jitter_positions(parsed.profiles, amplitude, int(config["seed"]))

    trees = []
    skipped = 0
    for profile in profiles:
        try:
            record, _ = reconstruct_tree(profile, allometry)
        except ReconstructionError:
            skipped += 1
            continue
        trees.append((record, profile.harvest_year))
    if not trees:
        raise GeometryError("no reconstructable trees in the harvester file")

    positions = np.array([[t.x, t.y] for t, _ in trees])
    polygons = alpha_shape(positions, alpha)
    segments = [
        HarvestedSegment(id=f"seg{idx:03d}", polygon=poly) for idx, poly in enumerate(polygons)
    ]
    hio.write_segments_geojson(out_dir / "segments.geojson", segments)

    all_cells = []
    for segment in segments:
        all_cells.extend(tessellate(segment, cell_size, threshold))
    accepted = [c for c in all_cells if c.accepted]

    # half-open cell membership; when two segments share a grid index the
    # lexicographically first cell id wins
    cell_by_index: dict[tuple[int, int], object] = {}
    for cell in sorted(accepted, key=lambda c: c.id):
        cell_by_index.setdefault((cell.ix, cell.iy), cell)
    members: dict[str, list] = {cell.id: [] for cell in cell_by_index.values()}
    years: dict[str, list[int]] = {cell.id: [] for cell in cell_by_index.values()}
    assigned = 0
    for record, year in trees:
        key = cell_index_of(record.x, record.y, cell_size)
        cell = cell_by_index.get(key)
        if cell is not None:
            members[cell.id].append(record)
            years[cell.id].append(year)
            assigned += 1

    rows = []
    unit_rows = []
    for cell in sorted(cell_by_index.values(), key=lambda c: c.id):
        cell_trees = members[cell.id]
        attrs = compute_attributes(cell_trees, cell_size * cell_size)
        rows.append((cell, len(cell_trees), attrs))
        center_x = (cell.ix + 0.5) * cell_size
        center_y = (cell.iy + 0.5) * cell_size
        meas_year = max(years[cell.id]) if years[cell.id] else 0
        unit_rows.append((cell.id, center_x, center_y, cell_size * cell_size, meas_year))

    hio.write_cell_attribute_csv(out_dir / "cells.csv", rows)
    with (out_dir / "cell_units.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(hio.PLOT_HEADER)
        for uid, cx, cy, area, meas_year in unit_rows:
            writer.writerow(
                [uid, repr(cx), repr(cy), "", repr(area), "", "", "", "", "1", str(meas_year)]
            )
    _write_resolved_config(out_dir, "cells", config)
    print(
        f"cells: {len(segments)} segments, {len(accepted)} accepted / "
        f"{len(all_cells) - len(accepted)} rejected cells, "
        f"{assigned}/{len(trees)} trees assigned, {skipped} profiles skipped, "
        f"{len(parsed.row_errors)} malformed rows"
    )


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _model_specs_from_config(config: dict) -> dict[str, ModelSpec]:
    specs = default_model_specs()
    for name, override in config["models"].items():
        if name not in ATTRIBUTE_NAMES:
            raise ValidationError(f"models: unknown attribute {name!r}")
        predictors = tuple(override["predictors"])
        specs[name] = ModelSpec(
            response=name,
            predictors=predictors,
            use_time_diff=bool(override.get("use_time_diff", "time_diff" in predictors)),
            expected_time_diff_sign=TimeDiffSign[
                override.get("expected_time_diff_sign", "positive").upper()
            ],
        )
    return specs


def cmd_fit(config: dict, out_dir: Path) -> None:
    cells_path = _require_file(config, "cells")
    metrics_path = _require_file(config, "metrics")
    responses = [str(r) for r in config["responses"]]
    unknown = [r for r in responses if r not in ATTRIBUTE_NAMES]
    if unknown:
        raise ValidationError(f"responses: unknown attributes {unknown}")
    specs = _model_specs_from_config(config)

    cell_rows = hio.read_cell_attribute_csv(cells_path)
    metrics = hio.read_metrics_csv(metrics_path)
    units = []
    for unit_id in sorted(cell_rows):
        accepted, _, attrs = cell_rows[unit_id]
        m = metrics.get(unit_id)
        if not accepted or m is None or not m.defined:
            continue
        units.append((m, attrs))
    if not units:
        raise FitError("no accepted training units with defined metrics")

    for response in responses:
        # treeless cells leave HL/QMD undefined; keep only usable rows
        usable = [(m, attrs) for m, attrs in units if not math.isnan(attrs[response])]
        model = ols_fit(usable, specs[response])
        hio.write_model_json(out_dir / f"model_{response}.json", model)
        dropped = " (time_diff dropped)" if model.time_diff_dropped else ""
        print(f"fit {response}: n={model.n} rmse%={model.rmse_pct_train:.2f}{dropped}")
    _write_resolved_config(out_dir, "fit", config)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(config: dict, out_dir: Path) -> None:
    plots_path = _require_file(config, "plots")
    trees_path = _require_file(config, "trees")
    metrics_path = _require_file(config, "metrics")
    model_paths = [Path(str(p)) for p in config["models"]]
    for p in model_paths:
        if not p.exists():
            raise ValidationError(f"models: file not found: {p}")
    min_n = int(config["min_stratum_n"])

    trees_by_plot = hio.read_tree_csv(trees_path)
    plots = hio.read_plot_csv(plots_path, trees_by_plot)
    metrics = hio.read_metrics_csv(metrics_path)
    labels, n_unclassifiable = classify_plots(plots)

    combined_rows = []
    for model_path in model_paths:
        model = hio.read_model_json(model_path)
        response = model.spec.response
        eval_plots = []
        scatter: dict[str, tuple[list, list]] = {sp.value: ([], []) for sp in Species}
        for plot in plots:
            m = metrics.get(plot.id)
            if m is None or not m.defined or plot.id not in labels:
                continue
            y = plot.attributes().as_dict()[response]
            if math.isnan(y):
                continue
            species = dominant_species(plot.trees)
            eval_plots.append(
                EvalPlot(
                    metrics=m,
                    y=y,
                    maturity=plot.maturity,
                    species=species,
                    datasets=labels[plot.id],
                )
            )
            if species is not None and plot.maturity is not None and plot.maturity != Maturity.M1:
                xs, ys = scatter[species.value]
                xs.append(predict(model, m))
                ys.append(y)
        report = stratified_evaluate(eval_plots, model, min_n)
        hio.write_eval_csv(out_dir / f"eval_{response}.csv", report)
        for row in report.rows:
            if not row.species:
                combined_rows.append((response, row))
        svg = svgplot.scatter_svg(
            {label: series for label, series in scatter.items() if series[0]},
            xlabel=f"predicted {response}",
            ylabel=f"observed {response}",
            title=f"{response}: observed vs predicted by dominant species",
        )
        (out_dir / f"scatter_{response}.svg").write_text(svg, encoding="utf-8")

    with (out_dir / "rmse_me_by_stratum.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["attribute", "dataset", "maturity", "n", "rmse_pct", "me_pct"])
        for response, row in combined_rows:
            writer.writerow(
                [
                    response,
                    row.dataset,
                    row.maturity,
                    str(row.n),
                    "" if math.isnan(row.rmse_pct) else repr(row.rmse_pct),
                    "" if math.isnan(row.me_pct) else repr(row.me_pct),
                ]
            )
    _write_resolved_config(out_dir, "evaluate", config)
    print(
        f"evaluate: {len(model_paths)} models on {len(plots)} plots "
        f"({n_unclassifiable} unclassifiable)"
    )


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def cmd_estimate(config: dict, out_dir: Path) -> None:
    input_path = _require_file(config, "input")
    attribute = str(config["attribute"])
    hl_only = (
        config["hl_only"] in (True, "1", "true", "True")
        if config["hl_only"] != ""
        else attribute == "HL"
    )
    mu_syn = None if config["mu_syn"] == "" else float(config["mu_syn"])

    sample = hio.read_estimation_csv(input_path)
    results = {"direct": direct_estimate(sample, hl_only=hl_only)}
    if mu_syn is not None:
        ma = ma_estimate(sample, mu_syn, hl_only=hl_only)
        re = relative_efficiency(results["direct"].variance, ma.variance)
        results["ma"] = dataclasses.replace(ma, re=re)
    hio.write_estimate_json(out_dir / f"estimate_{attribute}.json", results)
    _write_resolved_config(out_dir, "estimate", config)
    direct = results["direct"]
    line = f"estimate {attribute}: direct {direct.mu_hat:.3f} (2SE% {direct.two_se_pct:.2f})"
    if "ma" in results:
        ma_res = results["ma"]
        line += f", MA {ma_res.mu_hat:.3f} (2SE% {ma_res.two_se_pct:.2f}, RE {ma_res.re:.2f})"
    print(line)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _population_config_from_dict(data: dict, seed: int) -> PopulationConfig:
    kwargs: dict = {"master_seed": seed}
    simple = {
        "nx",
        "ny",
        "smoothing_radius",
        "latent_weight",
        "forest_fraction",
        "maturity_quantiles",
    }
    for key, value in data.items():
        if key in simple:
            kwargs[key] = tuple(value) if key == "maturity_quantiles" else value
        elif key == "attributes":
            base = dict(PopulationConfig.__dataclass_fields__["attributes"].default_factory())
            for name, spec in value.items():
                base[name] = AttributeField(float(spec["mean"]), float(spec["sd"]))
            kwargs["attributes"] = base
        elif key == "channels":
            base = dict(PopulationConfig.__dataclass_fields__["channels"].default_factory())
            for name, spec in value.items():
                multipliers = {
                    Maturity[m]: float(v)
                    for m, v in spec.get("slope_multipliers", {}).items()
                }
                base[name] = MetricChannel(
                    metric=spec["metric"],
                    intercept=float(spec["intercept"]),
                    slope=float(spec["slope"]),
                    noise_sd=float(spec["noise_sd"]),
                    slope_multipliers=multipliers,
                )
            kwargs["channels"] = base
        elif key == "master_seed":
            kwargs["master_seed"] = int(value)
        else:
            raise ValidationError(f"population: unknown key {key!r}")
    return PopulationConfig(**kwargs)


def _selection_rule_from_dict(data: dict) -> SelectionRule:
    kwargs: dict = {}
    for key, value in data.items():
        if key == "eligible_maturities":
            kwargs["eligible_maturities"] = frozenset(Maturity[m] for m in value)
        elif key in ("min_productivity", "fraction"):
            kwargs[key] = float(value)
        else:
            raise ValidationError(f"selection: unknown key {key!r}")
    return SelectionRule(**kwargs)


def _design_from_dict(data: dict) -> SRSDesign | SystematicDesign:
    kind = data.get("type", "srs")
    if kind == "srs":
        return SRSDesign(n=int(data.get("n", 250)))
    if kind == "systematic":
        return SystematicDesign(k=int(data.get("k", 7)))
    raise ValidationError(f"design: unknown type {kind!r}")


def cmd_simulate(config: dict, out_dir: Path) -> None:
    population = _population_config_from_dict(dict(config["population"]), int(config["seed"]))
    rule = _selection_rule_from_dict(dict(config["selection"]))
    design = _design_from_dict(dict(config["design"]))
    n_replicates = int(config["replicates"])
    if n_replicates < 2:
        raise ValidationError("replicates must be >= 2")

    result = run_replicates(population, rule, design, n_replicates, threads=config["threads"])

    with (out_dir / "replicates.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            [
                "replicate",
                "attribute",
                "truth",
                "mu_direct",
                "var_direct",
                "mu_syn",
                "mu_cor",
                "mu_ma",
                "var_ma",
                "re",
                "covered_direct",
                "covered_ma",
            ]
        )
        for rep in result.replicates:
            for name in ATTRIBUTE_NAMES:
                r = rep.attributes[name]
                writer.writerow(
                    [
                        str(rep.replicate_id),
                        name,
                        repr(r.truth),
                        repr(r.direct.mu_hat),
                        repr(r.direct.variance),
                        repr(r.ma.mu_syn),
                        repr(r.ma.mu_cor),
                        repr(r.ma.mu_hat),
                        repr(r.ma.variance),
                        repr(r.re) if math.isfinite(r.re) else "inf",
                        "1" if r.covered_direct else "0",
                        "1" if r.covered_ma else "0",
                    ]
                )

    summary = {"n_failed": result.n_failed, "attributes": result.summary}
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    _write_resolved_config(out_dir, "simulate", config)
    print(
        f"simulate: {len(result.replicates)} replicates completed, {result.n_failed} failed"
    )


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "metrics": cmd_metrics,
    "cells": cmd_cells,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
}


def _emit_error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.command, args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (ValidationError, OSError) as exc:
        _emit_error(exc)
        return EXIT_VALIDATION
    try:
        COMMANDS[args.command](config, out_dir)
    except ValidationError as exc:
        _emit_error(exc)
        return EXIT_VALIDATION
    except PROCESSING_ERRORS as exc:
        _emit_error(exc)
        return EXIT_PROCESSING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
