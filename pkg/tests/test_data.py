"""Tests of the dataset layer: synthetic generation, CSV round trips,
outlier filtering, and chronological splitting."""

from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest

from chokefit import data, physics
from chokefit.data import (
    Dataset,
    InputRanges,
    SchemaConfig,
    SyntheticConfig,
    chronological_split,
    filter_outliers,
    generate_mismatch_synthetic,
    generate_synthetic,
    load_csv,
)
from chokefit.exceptions import DataError, SchemaError
from chokefit.physics import TRUE_PARAMS


class TestGenerateSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticConfig(n_points=50, seed=7))
        b = generate_synthetic(SyntheticConfig(n_points=50, seed=7))
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.p1, b.p1)

    def test_noise_free_self_consistency(self):
        ds = generate_synthetic(SyntheticConfig(n_points=100, seed=1))
        truth, area = ds.generator_truth
        pred, ok = physics.batch_oil_rate(ds.p1, ds.p2, ds.t1, ds.eta_g, ds.eta_o,
                                          area.area(ds.u), truth.to_vector(), False)
        assert np.all(ok)
        assert np.array_equal(pred, ds.y)

    def test_noise_level_matches_configuration(self):
        sigma = 0.8
        ds = generate_synthetic(SyntheticConfig(n_points=10_000, seed=2,
                                                noise_sigma=sigma))
        truth, area = ds.generator_truth
        clean, _ = physics.batch_oil_rate(ds.p1, ds.p2, ds.t1, ds.eta_g, ds.eta_o,
                                          area.area(ds.u), truth.to_vector(), False)
        resid_std = float(np.std(ds.y - clean))
        assert 0.95 * sigma <= resid_std <= 1.05 * sigma

    def test_inputs_respect_ranges(self):
        cfg = SyntheticConfig(n_points=2000, seed=3)
        ds = generate_synthetic(cfg)
        r = cfg.input_ranges
        assert np.all((ds.p1 >= r.p1_bar[0] * 1e5) & (ds.p1 <= r.p1_bar[1] * 1e5))
        ratio = ds.p2 / ds.p1
        assert np.all((ratio >= r.pressure_ratio[0]) & (ratio <= r.pressure_ratio[1]))
        assert np.all((ds.u >= r.u[0]) & (ds.u <= r.u[1]))
        assert np.all(ds.eta_g + ds.eta_o <= 1.0)

    def test_covers_both_flow_regimes(self):
        ds = generate_synthetic(SyntheticConfig(n_points=2000, seed=4))
        ratio = ds.p2 / ds.p1
        p_rc = TRUE_PARAMS.p_rc
        assert np.sum(ratio < p_rc) > 200   # critical rows
        assert np.sum(ratio >= p_rc) > 200  # sub-critical rows

    def test_provenance_and_truth(self):
        ds = generate_synthetic(SyntheticConfig(n_points=10, seed=5))
        assert ds.provenance == "synthetic"
        assert ds.generator_truth is not None

    def test_infeasible_ranges_rejected(self):
        with pytest.raises(DataError):
            generate_synthetic(SyntheticConfig(
                n_points=10, input_ranges=InputRanges(pressure_ratio=(0.5, 1.5))))
        with pytest.raises(DataError):
            generate_synthetic(SyntheticConfig(
                n_points=10, input_ranges=InputRanges(u=(0.5, 1.7))))


class TestGenerateMismatch:
    def test_same_shape_matches_plain_generator(self):
        cfg = SyntheticConfig(n_points=40, seed=6)
        plain = generate_synthetic(cfg)
        same = generate_mismatch_synthetic(cfg, alt_area_shape="quadratic")
        assert np.array_equal(plain.y, same.y)

    def test_alt_shape_changes_targets_only(self):
        cfg = SyntheticConfig(n_points=40, seed=6)
        plain = generate_synthetic(cfg)
        alt = generate_mismatch_synthetic(cfg, alt_area_shape="smoothstep")
        assert np.array_equal(plain.u, alt.u)
        assert np.array_equal(plain.p1, alt.p1)
        assert not np.array_equal(plain.y, alt.y)

    def test_truth_records_alt_curve(self):
        alt = generate_mismatch_synthetic(SyntheticConfig(n_points=5, seed=1),
                                          alt_area_shape="smoothstep")
        _, area = alt.generator_truth
        assert area.shape == "smoothstep"


class TestCsv:
    def test_round_trip_exact(self, tmp_path):
        ds = generate_synthetic(SyntheticConfig(n_points=30, seed=8))
        path = tmp_path / "ds.csv"
        ds.to_csv(path)
        back = load_csv(path)
        for name in ("p1", "p2", "t1", "u", "eta_g", "eta_o", "y"):
            assert np.array_equal(getattr(ds, name), getattr(back, name)), name
        assert back.provenance == "ingested"
        assert back.generator_truth is None

    def test_well_formed_file(self, tmp_path):
        path = tmp_path / "ok.csv"
        path.write_text(
            "timestamp,p1,p2,t1,u,eta_g,eta_o,q_o\n"
            "2024-01-01T00:00:00,1e7,5e6,300,0.5,0.2,0.5,42.0\n"
            "2024-01-02T00:00:00,1.1e7,6e6,305,0.6,0.25,0.45,55.0\n"
            "2024-01-03T00:00:00,0.9e7,4e6,310,0.4,0.2,0.5,30.0\n")
        ds = load_csv(path)
        assert len(ds) == 3
        assert ds.timestamps == ("2024-01-01T00:00:00", "2024-01-02T00:00:00",
                                 "2024-01-03T00:00:00")
        assert ds.y[1] == 55.0

    def test_missing_column_names_it(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("timestamp,p1,p2,t1,eta_g,eta_o,q_o\n")
        with pytest.raises(SchemaError, match="'u'"):
            load_csv(path)

    def test_column_mapping_and_units(self, tmp_path):
        path = tmp_path / "mapped.csv"
        path.write_text(
            "PRES_UP,PRES_DOWN,TEMP,CHOKE_PCT,GAS,OIL,RATE\n"
            "100,50,300,50,0.2,0.5,42.0\n")
        schema = SchemaConfig(
            columns={"p1": "PRES_UP", "p2": "PRES_DOWN", "t1": "TEMP",
                     "u": "CHOKE_PCT", "eta_g": "GAS", "eta_o": "OIL",
                     "q_o": "RATE"},
            pressure_factor=1e5,  # bar -> Pa
            u_factor=0.01,        # percent -> fraction
        )
        ds = load_csv(path, schema)
        assert ds.p1[0] == 1e7
        assert ds.u[0] == 0.5
        assert ds.timestamps is None

    def test_bad_rows_skipped_with_warning(self, tmp_path, caplog):
        path = tmp_path / "partial.csv"
        path.write_text(
            "timestamp,p1,p2,t1,u,eta_g,eta_o,q_o\n"
            ",1e7,5e6,300,0.5,0.2,0.5,42.0\n"
            ",1e7,not_a_number,300,0.5,0.2,0.5,42.0\n"
            ",1e7,5e6,300,0.5,0.2,0.5,43.0\n")
        with caplog.at_level("WARNING"):
            ds = load_csv(path)
        assert len(ds) == 2
        assert any("line 3" in rec.getMessage() for rec in caplog.records)

    def test_mostly_bad_file_hard_error(self, tmp_path):
        path = tmp_path / "garbage.csv"
        path.write_text(
            "timestamp,p1,p2,t1,u,eta_g,eta_o,q_o\n"
            ",x,x,x,x,x,x,x\n"
            ",x,x,x,x,x,x,x\n"
            ",1e7,5e6,300,0.5,0.2,0.5,42.0\n")
        with pytest.raises(DataError, match="unparsable"):
            load_csv(path)

    def test_missing_file(self):
        with pytest.raises(DataError, match="not found"):
            load_csv("/nonexistent/nowhere.csv")


def seeded_violations_dataset():
    """100 clean rows with 7 seeded violations of known kinds."""
    ds = generate_synthetic(SyntheticConfig(n_points=100, seed=9))
    p1, p2, u, eta_g, y = (ds.p1.copy(), ds.p2.copy(), ds.u.copy(),
                           ds.eta_g.copy(), ds.y.copy())
    p1[3] = -5.0           # negative pressure
    p2[10] = -1.0          # negative pressure
    y[20] = -2.0           # negative flow
    u[30] = 1.4            # opening out of range
    eta_g[40] = 1.3        # bad composition
    y[50] = np.nan         # non-finite
    p1[60] = np.inf        # non-finite
    return replace(ds, p1=p1, p2=p2, u=u, eta_g=eta_g, y=y), {
        "non_positive_pressure": 2, "negative_flow": 1,
        "opening_out_of_range": 1, "bad_composition": 1, "non_finite": 2,
    }


class TestFilterOutliers:
    def test_clean_dataset_unchanged(self):
        ds = generate_synthetic(SyntheticConfig(n_points=50, seed=10))
        out, report = filter_outliers(ds)
        assert len(out) == len(ds)
        assert report.removed == {}
        assert np.array_equal(out.y, ds.y)

    def test_seeded_violations_counted_by_reason(self):
        ds, expected = seeded_violations_dataset()
        out, report = filter_outliers(ds)
        assert report.removed == expected
        assert report.n_removed == 7
        assert len(out) == 93

    def test_idempotent(self):
        ds, _ = seeded_violations_dataset()
        once, _ = filter_outliers(ds)
        twice, report = filter_outliers(once)
        assert report.removed == {}
        assert np.array_equal(once.y, twice.y)

    def test_optional_p2_filter(self):
        ds = generate_synthetic(SyntheticConfig(n_points=20, seed=11))
        p2 = ds.p2.copy()
        p2[4] = ds.p1[4] * 1.01
        ds = replace(ds, p2=p2)
        kept, _ = filter_outliers(ds)
        assert len(kept) == 20
        dropped, report = filter_outliers(ds, drop_p2_ge_p1=True)
        assert len(dropped) == 19
        assert report.removed == {"p2_not_below_p1": 1}

    def test_all_removed_is_error(self):
        ds = generate_synthetic(SyntheticConfig(n_points=5, seed=12))
        ds = replace(ds, y=np.full(5, -1.0))
        with pytest.raises(DataError):
            filter_outliers(ds)


def dataset_with_daily_timestamps(n, start="2023-01-01"):
    ds = generate_synthetic(SyntheticConfig(n_points=n, seed=13))
    t0 = datetime.fromisoformat(start)
    stamps = tuple((t0 + timedelta(days=i)).isoformat() for i in range(n))
    return replace(ds, timestamps=stamps)


class TestChronologicalSplit:
    def test_fraction_takes_last_rows(self):
        ds = generate_synthetic(SyntheticConfig(n_points=10, seed=14))
        train, test = chronological_split(ds, test_fraction=0.2)
        assert len(train) == 8 and len(test) == 2
        assert np.array_equal(test.y, ds.y[-2:])

    def test_partition_preserves_order(self):
        ds = dataset_with_daily_timestamps(50)
        train, test = chronological_split(ds, test_fraction=0.3)
        assert np.array_equal(np.concatenate([train.y, test.y]), ds.y)
        assert train.timestamps + test.timestamps == ds.timestamps

    def test_cutoff_ninety_days(self):
        ds = dataset_with_daily_timestamps(365)
        cutoff = (datetime.fromisoformat(ds.timestamps[-1])
                  - timedelta(days=90)).isoformat()
        train, test = chronological_split(ds, cutoff=cutoff)
        # rows strictly after the cutoff form the test side
        assert len(test) == 90
        assert len(train) == 275

    def test_cutoff_before_everything_is_error(self):
        ds = dataset_with_daily_timestamps(10)
        with pytest.raises(DataError, match="empty training"):
            chronological_split(ds, cutoff="2000-01-01")

    def test_unsorted_timestamps_get_sorted(self):
        ds = dataset_with_daily_timestamps(6)
        shuffled = ds.subset(np.array([3, 0, 5, 1, 4, 2]))
        train, test = chronological_split(shuffled, test_fraction=0.5)
        stamps = list(train.timestamps) + list(test.timestamps)
        assert stamps == sorted(stamps)

    def test_exactly_one_mode_required(self):
        ds = dataset_with_daily_timestamps(10)
        with pytest.raises(DataError):
            chronological_split(ds)
        with pytest.raises(DataError):
            chronological_split(ds, test_fraction=0.2, cutoff="2023-01-05")

    def test_cutoff_requires_timestamps(self):
        ds = generate_synthetic(SyntheticConfig(n_points=10, seed=15))
        with pytest.raises(DataError, match="timestamps"):
            chronological_split(ds, cutoff="2023-01-05")


class TestDatasetType:
    def test_row_accessor(self):
        ds = generate_synthetic(SyntheticConfig(n_points=5, seed=16))
        ts, x, y = ds.row(2)
        assert ts is None
        assert x.p1 == ds.p1[2]
        assert y == ds.y[2]

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(DataError):
            Dataset(p1=np.ones(3), p2=np.ones(3), t1=np.ones(3), u=np.ones(2),
                    eta_g=np.ones(3), eta_o=np.ones(3), y=np.ones(3))
