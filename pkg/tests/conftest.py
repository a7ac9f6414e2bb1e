"""Shared synthetic fixtures for pipeline and CLI tests."""

import numpy as np
import pytest

from harvmap import io as hio
from harvmap.geometry import Circle
from harvmap.metrics import EchoArray, TerrainRaster
from harvmap.trees import Maturity, PlotUnit, Species, TreeRecord, TreeSource

TERRAIN_ELEVATION = 100.0
PLOT_RADIUS = 8.92  # 250 m2
PLOT_CENTERS = {"p01": (30.0, 30.0), "p02": (70.0, 70.0), "p03": (100.0, 40.0)}
PLOT_CANOPY = {"p01": 12.0, "p02": 18.0, "p03": 24.0}


def build_terrain(path):
    raster = TerrainRaster(
        xll=0.0, yll=0.0, cell_size=2.0, nodata=-9999.0,
        grid=np.full((64, 64), TERRAIN_ELEVATION),
    )
    hio.write_esri_ascii(path, raster)
    return raster


def build_echoes(path, binary=False, seed=5):
    """Clustered echoes: each plot gets a constant-height canopy so plot
    hmean equals the configured canopy height exactly."""
    rng = np.random.default_rng(seed)
    xs, ys, zs, rn = [], [], [], []
    for plot_id, (cx, cy) in PLOT_CENTERS.items():
        theta = rng.uniform(0, 2 * np.pi, 120)
        radius = PLOT_RADIUS * np.sqrt(rng.uniform(0, 1, 120)) * 0.98
        xs.extend(cx + radius * np.cos(theta))
        ys.extend(cy + radius * np.sin(theta))
        zs.extend(np.full(120, TERRAIN_ELEVATION + PLOT_CANOPY[plot_id]))
        rn.extend([1] * 120)
    # background scatter (second returns, ignored by metrics)
    xs.extend(rng.uniform(0, 128, 100))
    ys.extend(rng.uniform(0, 128, 100))
    zs.extend(rng.uniform(TERRAIN_ELEVATION, TERRAIN_ELEVATION + 5, 100))
    rn.extend([2] * 100)
    n = len(xs)
    echoes = EchoArray(
        x=np.array(xs), y=np.array(ys), z=np.array(zs),
        return_number=np.array(rn, dtype=np.int64),
        num_returns=np.full(n, 2, dtype=np.int64),
        classification=np.ones(n, dtype=np.int64),
    )
    if binary:
        hio.write_echo_binary(path, echoes)
    else:
        hio.write_echo_csv(path, echoes)
    return echoes


def build_plots(plots_path, trees_path):
    """Three NFI-style plots; tree volumes are chosen so that per-hectare
    V equals the plot canopy height (10 trees * v / 250 m2 * 1e4)."""
    volumes = {pid: PLOT_CANOPY[pid] / 400.0 for pid in PLOT_CENTERS}
    trees_by_plot = {}
    plots = []
    for plot_id, (cx, cy) in PLOT_CENTERS.items():
        trees = [
            TreeRecord(
                id=f"{plot_id}:{i}",
                species=Species.SPRUCE if i % 3 else Species.PINE,
                dbh_cm=18.0 + 2.0 * i,
                height_m=PLOT_CANOPY[plot_id] - 1.0,
                volume_m3=volumes[plot_id],
                agb_kg=200.0,
                x=cx,
                y=cy,
                source=TreeSource.FIELD,
            )
            for i in range(10)
        ]
        trees_by_plot[plot_id] = trees
        plots.append(
            PlotUnit(
                id=plot_id,
                geometry=Circle(cx, cy, PLOT_RADIUS),
                area_m2=250.0,
                trees=tuple(trees),
                maturity=Maturity.M4,
                site_index=14.0,
                conif_prop=0.9,
                fwd_dist_m=150.0,
                is_forest=True,
                meas_year=2018,
            )
        )
    hio.write_tree_csv(trees_path, trees_by_plot)
    hio.write_plot_csv(plots_path, plots)
    return plots


def build_harvester_site(path, n_side=12, spacing=6.0, origin=(200.0, 200.0), seed=3):
    """A dense square planting of harvester stems: alpha shape recovers a
    (n_side - 1) * spacing square anchored on the 32 m grid."""
    rng = np.random.default_rng(seed)
    rows = [
        "tree_id,species,x,y,positioning_mode,harvest_year,base_height_m,"
        + ",".join(f"d{i + 1}" for i in range(240))
    ]
    tree = 0
    for i in range(n_side):
        for j in range(n_side):
            x = origin[0] + i * spacing
            y = origin[1] + j * spacing
            height = float(rng.uniform(16, 26))
            dbh = float(rng.uniform(0.9, 1.2)) * height
            exponent = float(rng.uniform(0.7, 1.1))
            diameters = []
            h = 0.2
            while True:
                d = dbh * ((height - h) / (height - 1.3)) ** exponent
                if d < 5.0 or len(diameters) >= 240:
                    break
                diameters.append(f"{d * 10.0:.2f}")  # mm
                h += 0.1
            rows.append(
                f"t{tree:04d},{'spruce' if tree % 4 else 'pine'},{x},{y},boom,2020,0.2,"
                + ",".join(diameters)
            )
            tree += 1
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return n_side, spacing, origin


@pytest.fixture
def pipeline_files(tmp_path):
    terrain = tmp_path / "terrain.asc"
    echoes = tmp_path / "echoes.csv"
    plots = tmp_path / "plots.csv"
    trees = tmp_path / "trees.csv"
    harvester = tmp_path / "harvester.csv"
    build_terrain(terrain)
    build_echoes(echoes)
    build_plots(plots, trees)
    build_harvester_site(harvester)
    return {
        "dir": tmp_path,
        "terrain": terrain,
        "echoes": echoes,
        "plots": plots,
        "trees": trees,
        "harvester": harvester,
    }
