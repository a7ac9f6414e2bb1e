"""File formats: plot and echo CSVs, FEM1 echo binary, ESRI ASCII grids,
metrics/evaluation/estimation tables, model JSON and segment GeoJSON.

Floats are written with ``repr`` (shortest round-trip form), so every
read-back reproduces the in-memory value bit for bit and rewriting the
same data gives byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from shapely.geometry import box, mapping as shapely_mapping

from .estimation import EstimateResult, SamplePlot
from .geometry import Circle, HarvestedGridCell
from .metrics import EchoArray, MetricsVector, TerrainRaster
from .regression import EvalReport, FittedModel, ModelSpec, TimeDiffSign
from .trees import (
    AttributeVector,
    Maturity,
    PlotUnit,
    TreeRecord,
    TreeSource,
    parse_species,
)


class FormatError(ValueError):
    pass


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    return repr(float(value))


def _parse_optional_float(token: str) -> float | None:
    token = token.strip()
    return float(token) if token else None


class _row_context:
    """Rewrap cell conversion failures as FormatErrors with file and line."""

    def __init__(self, path, line_number: int):
        self.path = path
        self.line_number = line_number

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, (ValueError, KeyError)):
            if not issubclass(exc_type, FormatError):
                raise FormatError(
                    f"{self.path}: line {self.line_number}: {exc}"
                ) from exc
        return False


# ---------------------------------------------------------------------------
# tree and plot CSVs
# ---------------------------------------------------------------------------

TREE_HEADER = ["plot_id", "x", "y", "species", "dbh_cm", "height_m", "volume_m3", "agb_kg", "source"]
PLOT_HEADER = [
    "plot_id",
    "center_x",
    "center_y",
    "radius_m",
    "area_m2",
    "maturity",
    "site_index",
    "conif_prop",
    "fwd_dist_m",
    "is_forest",
    "meas_year",
]


def read_tree_csv(path: str | Path) -> dict[str, list[TreeRecord]]:
    """Trees grouped by plot id; tree ids are generated per row."""
    trees: dict[str, list[TreeRecord]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != TREE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(TREE_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TREE_HEADER):
                raise FormatError(f"{path}: line {line_number}: wrong column count")
            plot_id = row[0]
            with _row_context(path, line_number):
                record = TreeRecord(
                    id=f"{plot_id}:{line_number}",
                    species=parse_species(row[3]),
                    dbh_cm=float(row[4]),
                    height_m=float(row[5]),
                    volume_m3=float(row[6]),
                    agb_kg=float(row[7]),
                    x=float(row[1]),
                    y=float(row[2]),
                    source=TreeSource(row[8].strip().lower()),
                )
            trees.setdefault(plot_id, []).append(record)
    return trees


def write_tree_csv(path: str | Path, trees_by_plot: Mapping[str, Sequence[TreeRecord]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TREE_HEADER)
        for plot_id in sorted(trees_by_plot):
            for t in trees_by_plot[plot_id]:
                writer.writerow(
                    [
                        plot_id,
                        _fmt(t.x),
                        _fmt(t.y),
                        t.species.value,
                        _fmt(t.dbh_cm),
                        _fmt(t.height_m),
                        _fmt(t.volume_m3),
                        _fmt(t.agb_kg),
                        t.source.value,
                    ]
                )


def read_plot_csv(
    path: str | Path, trees_by_plot: Mapping[str, Sequence[TreeRecord]] | None = None
) -> list[PlotUnit]:
    """Plot descriptors; an empty radius means a square unit of the given
    area centered on (center_x, center_y)."""
    plots: list[PlotUnit] = []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != PLOT_HEADER:
            raise FormatError(f"{path}: expected header {','.join(PLOT_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PLOT_HEADER):
                raise FormatError(f"{path}: line {line_number}: wrong column count")
            plot_id = row[0]
            with _row_context(path, line_number):
                cx, cy = float(row[1]), float(row[2])
                radius = _parse_optional_float(row[3])
                area = float(row[4])
                if radius is not None:
                    geometry = Circle(cx, cy, radius)
                else:
                    half = math.sqrt(area) / 2.0
                    geometry = box(cx - half, cy - half, cx + half, cy + half)
                maturity = Maturity[row[5].strip()] if row[5].strip() else None
                plots.append(
                    PlotUnit(
                        id=plot_id,
                        geometry=geometry,
                        area_m2=area,
                        trees=tuple(trees_by_plot.get(plot_id, ())) if trees_by_plot else (),
                        maturity=maturity,
                        site_index=_parse_optional_float(row[6]),
                        conif_prop=_parse_optional_float(row[7]),
                        fwd_dist_m=_parse_optional_float(row[8]),
                        is_forest=row[9].strip() in ("1", "true", "True"),
                        meas_year=int(row[10]),
                    )
                )
    return plots


def write_plot_csv(path: str | Path, plots: Sequence[PlotUnit]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PLOT_HEADER)
        for p in sorted(plots, key=lambda u: u.id):
            cx, cy = p.center
            radius = p.geometry.radius if isinstance(p.geometry, Circle) else None
            writer.writerow(
                [
                    p.id,
                    _fmt(cx),
                    _fmt(cy),
                    _fmt(radius),
                    _fmt(p.area_m2),
                    p.maturity.name if p.maturity is not None else "",
                    _fmt(p.site_index),
                    _fmt(p.conif_prop),
                    _fmt(p.fwd_dist_m),
                    "1" if p.is_forest else "0",
                    str(p.meas_year),
                ]
            )


# ---------------------------------------------------------------------------
# echoes
# ---------------------------------------------------------------------------

ECHO_HEADER = ["x", "y", "z", "return_number", "num_returns", "classification"]
FEM1_MAGIC = b"FEM1"
_FEM1_DTYPE = np.dtype(
    [
        ("x", "<f8"),
        ("y", "<f8"),
        ("z", "<f8"),
        ("return_number", "u1"),
        ("num_returns", "u1"),
        ("classification", "u1"),
    ]
)


def read_echo_csv(path: str | Path) -> EchoArray:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ECHO_HEADER:
            raise FormatError(f"{path}: expected header {','.join(ECHO_HEADER)}")
        rows = [row for row in reader if row]
    n = len(rows)
    x = np.empty(n)
    y = np.empty(n)
    z = np.empty(n)
    rn = np.empty(n, dtype=np.int64)
    nr = np.empty(n, dtype=np.int64)
    cls = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != len(ECHO_HEADER):
            raise FormatError(f"{path}: line {i + 2}: wrong column count")
        with _row_context(path, i + 2):
            x[i], y[i], z[i] = float(row[0]), float(row[1]), float(row[2])
            rn[i], nr[i], cls[i] = int(row[3]), int(row[4]), int(row[5])
    return EchoArray(x=x, y=y, z=z, return_number=rn, num_returns=nr, classification=cls)


def write_echo_csv(path: str | Path, echoes: EchoArray) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ECHO_HEADER)
        for i in range(len(echoes)):
            writer.writerow(
                [
                    _fmt(echoes.x[i]),
                    _fmt(echoes.y[i]),
                    _fmt(echoes.z[i]),
                    str(int(echoes.return_number[i])),
                    str(int(echoes.num_returns[i])),
                    str(int(echoes.classification[i])),
                ]
            )


def read_echo_binary(path: str | Path) -> EchoArray:
    """Little-endian FEM1 records: magic, u64 count, then 27-byte records
    (x, y, z as f64; return_number, num_returns, classification as u8)."""
    raw = Path(path).read_bytes()
    if raw[:4] != FEM1_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FEM1_MAGIC!r}")
    count = int.from_bytes(raw[4:12], "little")
    expected = 12 + count * _FEM1_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: truncated file: expected {expected} bytes, got {len(raw)}")
    records = np.frombuffer(raw, dtype=_FEM1_DTYPE, count=count, offset=12)
    return EchoArray(
        x=records["x"].astype(np.float64),
        y=records["y"].astype(np.float64),
        z=records["z"].astype(np.float64),
        return_number=records["return_number"].astype(np.int64),
        num_returns=records["num_returns"].astype(np.int64),
        classification=records["classification"].astype(np.int64),
    )


def write_echo_binary(path: str | Path, echoes: EchoArray) -> None:
    records = np.empty(len(echoes), dtype=_FEM1_DTYPE)
    records["x"] = echoes.x
    records["y"] = echoes.y
    records["z"] = echoes.z
    records["return_number"] = echoes.return_number
    records["num_returns"] = echoes.num_returns
    records["classification"] = echoes.classification
    with Path(path).open("wb") as handle:
        handle.write(FEM1_MAGIC)
        handle.write(len(echoes).to_bytes(8, "little"))
        handle.write(records.tobytes())


def read_echoes(path: str | Path) -> EchoArray:
    """Dispatch on content: FEM1 binary or CSV."""
    path = Path(path)
    with path.open("rb") as handle:
        magic = handle.read(4)
    if magic == FEM1_MAGIC:
        return read_echo_binary(path)
    return read_echo_csv(path)


# ---------------------------------------------------------------------------
# ESRI ASCII terrain grid
# ---------------------------------------------------------------------------


def read_esri_ascii(path: str | Path) -> TerrainRaster:
    """ESRI ASCII grid; data rows run north to south in the file and are
    flipped so that row 0 of the in-memory grid is the southernmost."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header: dict[str, float] = {}
    data_start = 0
    try:
        for i, line in enumerate(lines):
            parts = line.split()
            if len(parts) == 2 and parts[0].lower() in (
                "ncols",
                "nrows",
                "xllcorner",
                "yllcorner",
                "cellsize",
                "nodata_value",
            ):
                header[parts[0].lower()] = float(parts[1])
            else:
                data_start = i
                break
    except ValueError as exc:
        raise FormatError(f"{path}: bad header value: {exc}") from exc
    required = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize"}
    missing = required - set(header)
    if missing:
        raise FormatError(f"{path}: missing header keys: {sorted(missing)}")
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    nodata = header.get("nodata_value", -9999.0)
    values = []
    try:
        for line in lines[data_start:]:
            values.extend(float(v) for v in line.split())
    except ValueError as exc:
        raise FormatError(f"{path}: bad grid value: {exc}") from exc
    if len(values) != ncols * nrows:
        raise FormatError(
            f"{path}: expected {ncols * nrows} grid values, got {len(values)}"
        )
    grid = np.array(values, dtype=np.float64).reshape(nrows, ncols)[::-1].copy()
    return TerrainRaster(
        xll=header["xllcorner"],
        yll=header["yllcorner"],
        cell_size=header["cellsize"],
        nodata=nodata,
        grid=grid,
    )


def write_esri_ascii(path: str | Path, raster: TerrainRaster) -> None:
    lines = [
        f"ncols {raster.ncols}",
        f"nrows {raster.nrows}",
        f"xllcorner {_fmt(raster.xll)}",
        f"yllcorner {_fmt(raster.yll)}",
        f"cellsize {_fmt(raster.cell_size)}",
        f"NODATA_value {_fmt(raster.nodata)}",
    ]
    for row in raster.grid[::-1]:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# metrics table
# ---------------------------------------------------------------------------

METRICS_HEADER = [
    "unit_id",
    "hmean",
    "hvar",
    "h10",
    "h25",
    "h50",
    "h75",
    "h95",
    "d2",
    "time_diff",
    "n_first_echoes",
]


def write_metrics_csv(path: str | Path, metrics_by_unit: Mapping[str, MetricsVector]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for unit_id in sorted(metrics_by_unit):
            m = metrics_by_unit[unit_id]
            writer.writerow(
                [
                    unit_id,
                    _fmt(m.hmean),
                    _fmt(m.hvar),
                    _fmt(m.h10),
                    _fmt(m.h25),
                    _fmt(m.h50),
                    _fmt(m.h75),
                    _fmt(m.h95),
                    _fmt(m.d2),
                    str(m.time_diff),
                    str(m.n_first_echoes),
                ]
            )


def read_metrics_csv(path: str | Path) -> dict[str, MetricsVector]:
    out: dict[str, MetricsVector] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise FormatError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            with _row_context(path, line_number):
                n_first = int(row[10])
                if n_first == 0:
                    out[row[0]] = MetricsVector.undefined(int(row[9]))
                    continue
                out[row[0]] = MetricsVector(
                    hmean=float(row[1]),
                    hvar=float(row[2]),
                    h10=float(row[3]),
                    h25=float(row[4]),
                    h50=float(row[5]),
                    h75=float(row[6]),
                    h95=float(row[7]),
                    d2=float(row[8]),
                    time_diff=int(row[9]),
                    n_first_echoes=n_first,
                )
    return out


# ---------------------------------------------------------------------------
# fitted model JSON
# ---------------------------------------------------------------------------


def model_to_dict(model: FittedModel) -> dict:
    return {
        "response": model.spec.response,
        "predictors": list(model.spec.predictors),
        "expected_time_diff_sign": model.spec.expected_time_diff_sign.name.lower(),
        "intercept": model.intercept,
        "coefficients": dict(model.coefficients),
        "se": dict(model.se),
        "p": dict(model.p_values),
        "n": model.n,
        "rmse_train": model.rmse_train,
        "rmse_pct_train": model.rmse_pct_train,
        "r2_train": model.r2_train,
        "time_diff_dropped": model.time_diff_dropped,
    }


def model_from_dict(data: Mapping) -> FittedModel:
    predictors = tuple(data["predictors"])
    spec = ModelSpec(
        response=data["response"],
        predictors=predictors,
        use_time_diff="time_diff" in predictors,
        expected_time_diff_sign=TimeDiffSign[data["expected_time_diff_sign"].upper()],
    )
    return FittedModel(
        spec=spec,
        intercept=float(data["intercept"]),
        coefficients={k: float(v) for k, v in data["coefficients"].items()},
        se={k: float(v) for k, v in data["se"].items()},
        p_values={k: float(v) for k, v in data["p"].items()},
        n=int(data["n"]),
        rmse_train=float(data["rmse_train"]),
        rmse_pct_train=float(data["rmse_pct_train"]),
        r2_train=float(data["r2_train"]),
        time_diff_dropped=bool(data["time_diff_dropped"]),
    )


def write_model_json(path: str | Path, model: FittedModel) -> None:
    Path(path).write_text(
        json.dumps(model_to_dict(model), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_model_json(path: str | Path) -> FittedModel:
    try:
        return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: not a valid model file: {exc}") from exc


# ---------------------------------------------------------------------------
# evaluation report CSV
# ---------------------------------------------------------------------------

EVAL_HEADER = ["dataset", "maturity", "species", "n", "rmse", "rmse_pct", "me", "me_pct", "r2_pred", "low_n"]


def write_eval_csv(path: str | Path, report: EvalReport) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for row in report.rows:
            writer.writerow(
                [
                    row.dataset,
                    row.maturity,
                    row.species,
                    str(row.n),
                    _fmt(row.rmse),
                    _fmt(row.rmse_pct),
                    _fmt(row.me),
                    _fmt(row.me_pct),
                    _fmt(row.r2_pred),
                    "1" if row.low_n else "0",
                ]
            )


# ---------------------------------------------------------------------------
# estimation input/output
# ---------------------------------------------------------------------------

ESTIMATION_HEADER = ["plot_id", "y", "y_hat", "forest_indicator", "hl_defined"]


def read_estimation_csv(path: str | Path) -> list[SamplePlot]:
    plots: list[SamplePlot] = []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ESTIMATION_HEADER:
            raise FormatError(f"{path}: expected header {','.join(ESTIMATION_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            with _row_context(path, line_number):
                plots.append(
                    SamplePlot(
                        id=row[0],
                        y=_parse_optional_float(row[1]),
                        y_hat=_parse_optional_float(row[2]),
                        forest_indicator=int(row[3]),
                        hl_defined=row[4].strip() in ("1", "true", "True"),
                    )
                )
    return plots


def write_estimation_csv(path: str | Path, plots: Sequence[SamplePlot]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ESTIMATION_HEADER)
        for p in sorted(plots, key=lambda q: q.id):
            writer.writerow(
                [p.id, _fmt(p.y), _fmt(p.y_hat), str(p.forest_indicator), "1" if p.hl_defined else "0"]
            )


def estimate_to_dict(result: EstimateResult) -> dict:
    return {
        "estimator": result.estimator.value,
        "mu_hat": result.mu_hat,
        "variance": result.variance,
        "se": result.se,
        "two_se_pct": result.two_se_pct,
        "mu_cor": result.mu_cor,
        "mu_cor_pct": result.mu_cor_pct,
        "mu_syn": result.mu_syn,
        "n_s": result.n_s,
        "n_forest": result.n_forest,
        "re": result.re,
    }


def write_estimate_json(path: str | Path, results: Mapping[str, EstimateResult]) -> None:
    payload = {key: estimate_to_dict(res) for key, res in sorted(results.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# segment GeoJSON and grid-cell attribute CSV
# ---------------------------------------------------------------------------


def segments_to_geojson(segments: Sequence) -> dict:
    features = []
    for seg in segments:
        features.append(
            {
                "type": "Feature",
                "properties": {
                    "id": seg.id,
                    "source_stand_id": seg.source_stand_id,
                    "area_m2": seg.area_m2,
                },
                "geometry": shapely_mapping(seg.polygon),
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_segments_geojson(path: str | Path, segments: Sequence) -> None:
    Path(path).write_text(
        json.dumps(segments_to_geojson(segments), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


CELL_ATTRIBUTE_HEADER = [
    "unit_id",
    "coverage_fraction",
    "accepted",
    "n_trees",
    "HL",
    "V",
    "N",
    "AGB",
    "G",
    "QMD",
]


def read_cell_attribute_csv(
    path: str | Path,
) -> dict[str, tuple[bool, int, dict[str, float]]]:
    """Per-cell rows as (accepted, tree count, attribute dict)."""
    out: dict[str, tuple[bool, int, dict[str, float]]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != CELL_ATTRIBUTE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CELL_ATTRIBUTE_HEADER)}")
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            with _row_context(path, line_number):
                attrs = {
                    name: float(row[4 + i]) if row[4 + i] else float("nan")
                    for i, name in enumerate(("HL", "V", "N", "AGB", "G", "QMD"))
                }
                out[row[0]] = (row[2] == "1", int(row[3]), attrs)
    return out


def write_cell_attribute_csv(
    path: str | Path,
    rows: Sequence[tuple[HarvestedGridCell, int, AttributeVector]],
) -> None:
    """Per-cell attribute table: (cell, tree count, attributes) triples."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CELL_ATTRIBUTE_HEADER)
        for cell, n_trees, attrs in sorted(rows, key=lambda r: r[0].id):
            d = attrs.as_dict()
            writer.writerow(
                [
                    cell.id,
                    _fmt(cell.coverage_fraction),
                    "1" if cell.accepted else "0",
                    str(n_trees),
                    _fmt(d["HL"]),
                    _fmt(d["V"]),
                    _fmt(d["N"]),
                    _fmt(d["AGB"]),
                    _fmt(d["G"]),
                    _fmt(d["QMD"]),
                ]
            )
