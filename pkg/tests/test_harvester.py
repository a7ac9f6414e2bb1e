"""Harvester parsing, jitter and stem reconstruction oracles."""

import math

import numpy as np
import pytest

from harvmap.harvester import (
    AllometryConfig,
    ConfigurationError,
    HarvesterParseError,
    PositioningMode,
    ReconstructionError,
    SpeciesAllometry,
    StemProfile,
    estimate_dbh,
    estimate_height,
    jitter_positions,
    parse_harvester_file,
    reconstruct_tree,
    smooth_diameters,
    taper_is_physical,
    tree_agb,
    tree_volume,
    write_harvester_file,
)
from harvmap.trees import Species

BH = 1.3


def power_taper_profile(
    dbh=30.0, height=25.0, exponent=0.8, base=0.2, top_diameter=5.0,
    min_coverage=0.0, species=Species.SPRUCE, mode=PositioningMode.BOOM,
    tree_id="t1", noise=None,
):
    """Diameters sampled every 10 cm from the closed-form taper.

    Measurement stops at the top-diameter cutoff, but never before
    ``min_coverage`` of the above-breast-height stem span is sampled
    (short stems are processed further down the taper in practice).
    """
    diameters = []
    h = base
    while True:
        u = (height - h) / (height - BH)
        d = dbh * u**exponent
        covered = (h - BH) / (height - BH)
        if d <= 0.5 or h >= height - 0.3:
            break
        if d < top_diameter and covered >= min_coverage:
            break
        diameters.append(d)
        h += 0.1
    d = np.asarray(diameters)
    if noise is not None:
        d = d + noise[: d.shape[0]]
    return StemProfile(
        tree_id=tree_id,
        species=species,
        x=0.0,
        y=0.0,
        positioning_mode=mode,
        harvest_year=2020,
        base_height_m=base,
        diameters_cm=d,
    )


class TestSmoothing:
    def test_spike_damped(self):
        d = np.array([20.0, 19.8, 30.0, 19.4, 19.2])
        smoothed = smooth_diameters(d)
        assert smoothed[2] == pytest.approx(19.8)
        assert smoothed[0] == 20.0 and smoothed[-1] == 19.2

    def test_short_sequences_pass_through(self):
        d = np.array([10.0, 9.0])
        assert list(smooth_diameters(d)) == [10.0, 9.0]

    def test_taper_validation(self):
        good = power_taper_profile()
        assert taper_is_physical(good)
        bad = StemProfile(
            "b", Species.PINE, 0, 0, PositioningMode.BOOM, 2020, 0.2,
            np.array([20.0, 20.5, 21.0, 21.5, 22.0]),
        )
        assert not taper_is_physical(bad)


class TestEstimateDbh:
    def test_bracketing_interpolation(self):
        profile = StemProfile(
            "t", Species.SPRUCE, 0, 0, PositioningMode.BOOM, 2020, 1.25,
            np.array([20.0, 19.8]),
        )
        est = estimate_dbh(profile)
        assert est.dbh_cm == pytest.approx(19.9)
        assert not est.extrapolated

    def test_constant_profile(self):
        profile = StemProfile(
            "t", Species.SPRUCE, 0, 0, PositioningMode.BOOM, 2020, 0.2,
            np.full(30, 25.0),
        )
        assert estimate_dbh(profile).dbh_cm == pytest.approx(25.0)

    def test_closed_form_taper(self):
        profile = power_taper_profile(dbh=30.0, height=25.0, exponent=0.8)
        est = estimate_dbh(profile)
        assert est.dbh_cm == pytest.approx(30.0, abs=0.05)

    def test_start_above_breast_height_extrapolates_with_flag(self):
        profile = StemProfile(
            "t", Species.SPRUCE, 0, 0, PositioningMode.BOOM, 2020, 1.5,
            np.array([19.0, 18.9, 18.8, 18.7]),
        )
        est = estimate_dbh(profile)
        assert est.extrapolated
        assert est.dbh_cm == pytest.approx(19.2, abs=1e-9)

    def test_start_above_two_meters_is_error(self):
        profile = StemProfile(
            "t", Species.SPRUCE, 0, 0, PositioningMode.BOOM, 2020, 2.1,
            np.array([18.0, 17.9]),
        )
        with pytest.raises(ReconstructionError):
            estimate_dbh(profile)


class TestEstimateHeight:
    def test_self_consistency_noiseless(self):
        profile = power_taper_profile(dbh=30.0, height=25.0, exponent=0.8)
        fit = estimate_height(profile)
        assert fit.converged and not fit.fallback
        assert fit.height_m == pytest.approx(25.0, abs=0.01)
        assert fit.exponent == pytest.approx(0.8, abs=0.01)

    def test_cone_recovery(self):
        profile = power_taper_profile(dbh=24.0, height=18.0, exponent=1.0)
        fit = estimate_height(profile)
        assert fit.height_m == pytest.approx(18.0, abs=0.01)

    def test_two_point_profile_falls_back(self):
        profile = StemProfile(
            "t", Species.SPRUCE, 0, 0, PositioningMode.BOOM, 2020, 0.2,
            np.array([20.0, 19.9]),
        )
        fit = estimate_height(profile)
        assert fit.fallback and not fit.converged
        assert fit.height_m > profile.top_height_m

    def test_noisy_round_trip_sample(self):
        rng = np.random.default_rng(31)
        for _ in range(40):
            height = float(rng.uniform(10, 35))
            exponent = float(rng.uniform(0.6, 1.2))
            dbh = float(rng.uniform(0.9, 1.3)) * height
            noise = rng.uniform(-0.04, 0.04, size=600)  # 0.4 mm in cm
            profile = power_taper_profile(
                dbh=dbh, height=height, exponent=exponent, noise=noise, min_coverage=0.72
            )
            fit = estimate_height(profile)
            assert fit.converged
            assert abs(fit.height_m - height) / height < 0.02
            assert abs(fit.dbh_cm - dbh) < 0.05
            vol = tree_volume(fit, stump_height_m=0.0)
            true_vol = (
                math.pi / 4 * (dbh / 100) ** 2 * (height - BH) / (2 * exponent + 1)
                * (height / (height - BH)) ** (2 * exponent + 1)
            )
            assert abs(vol - true_vol) / true_vol < 0.03


class TestTreeVolume:
    def test_cone_closed_form(self):
        profile = power_taper_profile(dbh=30.0, height=25.0, exponent=1.0)
        fit = estimate_height(profile)
        vol = tree_volume(fit, stump_height_m=0.0)
        basal_diameter_m = 0.30 * 25.0 / (25.0 - BH)
        cone = math.pi / 12.0 * basal_diameter_m**2 * 25.0
        assert vol == pytest.approx(cone, rel=0.005)

    def test_cylinder_limit(self):
        from harvmap.harvester import TaperFit

        fit = TaperFit(dbh_cm=20.0, height_m=10.0, exponent=1e-9, converged=True,
                       fallback=False, dbh_extrapolated=False)
        vol = tree_volume(fit, stump_height_m=0.0)
        assert vol == pytest.approx(math.pi * 0.01 * 10.0, rel=0.01)

    def test_degenerate_zero_height(self):
        from harvmap.harvester import TaperFit

        fit = TaperFit(dbh_cm=20.0, height_m=5.0, exponent=1.0, converged=True,
                       fallback=False, dbh_extrapolated=False)
        assert tree_volume(fit, stump_height_m=5.0) == 0.0


class TestTreeAgb:
    def test_degenerate_parameters(self):
        config = AllometryConfig(
            species={sp: SpeciesAllometry(1.0, 1e-12, 1e-12) for sp in Species}
        )
        assert tree_agb(33.0, 21.0, Species.PINE, config) == pytest.approx(1.0)

    def test_hand_arithmetic(self):
        config = AllometryConfig(
            species={sp: SpeciesAllometry(0.05, 2.0, 1.0) for sp in Species}
        )
        assert tree_agb(20.0, 15.0, Species.SPRUCE, config) == pytest.approx(300.0)

    def test_missing_species_is_configuration_error(self):
        with pytest.raises(ConfigurationError):
            AllometryConfig(species={Species.SPRUCE: SpeciesAllometry(0.05, 2.0, 1.0)})

    def test_nonpositive_inputs_rejected(self):
        with pytest.raises(ReconstructionError):
            tree_agb(0.0, 10.0, Species.PINE)


class TestJitter:
    def test_boom_positions_unchanged(self):
        profile = power_taper_profile(mode=PositioningMode.BOOM)
        profile = StemProfile(**{**profile.__dict__, "x": 100.0, "y": 200.0})
        out = jitter_positions([profile], seed=42)
        assert out[0].x == 100.0 and out[0].y == 200.0

    def test_zero_amplitude(self):
        profile = power_taper_profile(mode=PositioningMode.MACHINE)
        out = jitter_positions([profile], amplitude_m=0.0, seed=42)
        assert out[0].x == profile.x and out[0].y == profile.y

    def test_machine_offsets_bounded_and_deterministic(self):
        profiles = [
            power_taper_profile(mode=PositioningMode.MACHINE, tree_id=f"t{i}")
            for i in range(50)
        ]
        first = jitter_positions(profiles, amplitude_m=8.0, seed=42)
        second = jitter_positions(profiles, amplitude_m=8.0, seed=42)
        for a, b in zip(first, second):
            assert a.x == b.x and a.y == b.y
            assert abs(a.x) <= 8.0 and abs(a.y) <= 8.0
        third = jitter_positions(profiles, amplitude_m=8.0, seed=43)
        assert any(a.x != c.x for a, c in zip(first, third))

    def test_boom_rows_do_not_consume_draws(self):
        machine = power_taper_profile(mode=PositioningMode.MACHINE, tree_id="m")
        boom = power_taper_profile(mode=PositioningMode.BOOM, tree_id="b")
        alone = jitter_positions([machine], seed=7)[0]
        mixed = jitter_positions([boom, machine], seed=7)[1]
        assert alone.x == mixed.x and alone.y == mixed.y


class TestParsing:
    def write(self, tmp_path, text):
        path = tmp_path / "harv.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_golden_single_tree(self, tmp_path):
        diameters = ",".join(str(300 - 5 * i) for i in range(20))
        path = self.write(
            tmp_path,
            "tree_id,species,x,y,positioning_mode,harvest_year,base_height_m,"
            + ",".join(f"d{i + 1}" for i in range(20))
            + "\n"
            + f"t1,spruce,10.0,20.0,boom,2020,0.2,{diameters}\n",
        )
        result = parse_harvester_file(path)
        assert not result.row_errors
        assert len(result.profiles) == 1
        profile = result.profiles[0]
        assert profile.diameters_cm.shape[0] == 20
        assert profile.diameters_cm[0] == pytest.approx(30.0)  # mm to cm

    def test_empty_file_with_header(self, tmp_path):
        path = self.write(
            tmp_path, "tree_id,species,x,y,positioning_mode,harvest_year,base_height_m,d1\n"
        )
        result = parse_harvester_file(path)
        assert result.profiles == [] and result.row_errors == []

    def test_missing_header_fails(self, tmp_path):
        path = self.write(tmp_path, "a,b,c\n1,2,3\n")
        with pytest.raises(HarvesterParseError):
            parse_harvester_file(path)

    def test_bad_diameter_collected_with_line_number(self, tmp_path):
        path = self.write(
            tmp_path,
            "tree_id,species,x,y,positioning_mode,harvest_year,base_height_m,d1,d2\n"
            "t1,pine,0,0,boom,2020,0.2,200,-5\n"
            "t2,pine,0,0,boom,2020,0.2,210,205\n",
        )
        result = parse_harvester_file(path)
        assert len(result.profiles) == 1
        assert len(result.row_errors) == 1
        assert result.row_errors[0].line_number == 2

    def test_parse_serialize_parse_lossless(self, tmp_path):
        rng = np.random.default_rng(3)
        seed_profiles = [
            power_taper_profile(
                dbh=float(rng.uniform(15, 45)),
                height=float(rng.uniform(12, 30)),
                exponent=float(rng.uniform(0.6, 1.2)),
                tree_id=f"t{i}",
                mode=PositioningMode.MACHINE if i % 2 else PositioningMode.BOOM,
            )
            for i in range(8)
        ]
        path = tmp_path / "round.csv"
        write_harvester_file(path, seed_profiles)
        first = parse_harvester_file(path)
        assert not first.row_errors
        path2 = tmp_path / "round2.csv"
        write_harvester_file(path2, first.profiles)
        second = parse_harvester_file(path2)
        for a, b in zip(first.profiles, second.profiles):
            assert a.tree_id == b.tree_id
            assert a.species == b.species
            assert a.positioning_mode == b.positioning_mode
            assert a.base_height_m == b.base_height_m
            np.testing.assert_array_equal(a.diameters_cm, b.diameters_cm)
        # second serialization is byte-identical
        path3 = tmp_path / "round3.csv"
        write_harvester_file(path3, second.profiles)
        assert path2.read_bytes() == path3.read_bytes()


def test_reconstruct_tree_end_to_end():
    profile = power_taper_profile(dbh=28.0, height=24.0, exponent=0.9)
    record, fit = reconstruct_tree(profile)
    assert record.dbh_cm == pytest.approx(28.0, abs=0.05)
    assert record.height_m == pytest.approx(24.0, rel=0.01)
    assert record.volume_m3 > 0 and record.agb_kg > 0
