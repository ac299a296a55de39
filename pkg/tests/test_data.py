import numpy as np
import pytest

from tcnlab.data import (
    CHANNELS,
    CSV_COLUMNS,
    N_CHANNELS,
    SOFA,
    CohortConfig,
    PatientRecord,
    build_samples,
    fit_standardizer,
    generate_cohort,
    label_sepsis_onset,
    load_cohort_csv,
    samples_to_arrays,
    save_cohort_csv,
    split_patients,
    split_train_test,
    standardize_features,
    windowize,
)
from tcnlab.errors import ConfigError, DataError, FormatError

from oracles import onset_oracle


def make_record(sofa, icu_in=100, suspicion=None, pid="P1", rng=None):
    n = len(sofa)
    rng = rng or np.random.default_rng(0)
    feats = np.round(rng.normal(50.0, 5.0, size=(n, N_CHANNELS)), 1)
    feats[:, 0] = 60.0
    feats[:, SOFA] = sofa
    return PatientRecord(pid, icu_in, icu_in + n - 1, feats, suspicion)


class TestLabeling:
    def test_constant_sofa(self):
        assert label_sepsis_onset(make_record([3] * 30, suspicion=110)) is None

    def test_rise_at_third_hour(self):
        rec = make_record([1, 1, 3, 3, 4], icu_in=0, suspicion=48)
        assert label_sepsis_onset(rec) == 2

    def test_left_clamp(self):
        sofa = [2] * 5 + [4] * 10
        rec = make_record(sofa, icu_in=10, suspicion=11)
        assert label_sepsis_onset(rec) == 15

    def test_no_suspicion(self):
        assert label_sepsis_onset(make_record([0, 5, 9])) is None

    def test_rise_outside_window_ignored(self):
        sofa = [1] * 80 + [5] * 5
        rec = make_record(sofa, icu_in=0, suspicion=10)  # window ends at hour 34
        assert label_sepsis_onset(rec) is None

    def test_running_min_vs_first(self):
        rec = make_record([3, 1, 2, 3, 3], icu_in=0, suspicion=2)
        assert label_sepsis_onset(rec) == 3
        assert label_sepsis_onset(rec, baseline="first") is None

    def test_unknown_baseline(self):
        with pytest.raises(ConfigError):
            label_sepsis_onset(make_record([1, 2]), baseline="median")

    @pytest.mark.parametrize("baseline", ["running_min", "first"])
    def test_matches_bruteforce(self, baseline):
        rng = np.random.default_rng(7)
        hits = 0
        for _ in range(1200):
            n = int(rng.integers(1, 90))
            sofa = np.clip(np.cumsum(rng.integers(-1, 2, size=n)) + rng.integers(0, 8), 0, 24)
            icu_in = int(rng.integers(0, 50))
            # suspicion anywhere from well before admission to well after discharge
            sus = None if rng.random() < 0.1 else int(icu_in + rng.integers(-40, n + 40))
            rec = make_record(sofa, icu_in, sus, rng=rng)
            got = label_sepsis_onset(rec, baseline)
            assert got == onset_oracle(rec, baseline)
            hits += got is not None
        assert hits > 100

    def test_translation_invariance(self, rng):
        for _ in range(200):
            n = int(rng.integers(5, 60))
            sofa = rng.integers(0, 10, size=n)
            rec = make_record(sofa, int(rng.integers(0, 20)), int(rng.integers(0, 80)), rng=rng)
            shift = int(rng.integers(-10, 500))
            base, moved = label_sepsis_onset(rec), label_sepsis_onset(rec.shifted(shift))
            assert moved == (None if base is None else base + shift)

    def test_sofa_offset_invariance(self, rng):
        for _ in range(200):
            sofa = rng.integers(0, 10, size=int(rng.integers(5, 60)))
            rec = make_record(sofa, 0, int(rng.integers(0, 60)), rng=rng)
            up = make_record(sofa + 7, 0, rec.suspicion_hour, rng=rng)
            assert label_sepsis_onset(rec) == label_sepsis_onset(up)


class TestWindowize:
    def test_fifteen_hour_stay(self):
        rec = make_record([2] * 15, icu_in=40)
        out = windowize(rec, None)
        # enumerate every candidate end hour
        ends = [e for e in range(40, 55) if e - 12 >= 40 and e + 2 <= 54]
        assert [s.window_end_hour for s in out] == ends == [52]
        assert out[0].label == 0
        assert out[0].features.shape == (9, 13)

    def test_short_stay(self):
        assert windowize(make_record([1] * 12), None) == []

    def test_features_are_window_rows(self):
        rec = make_record([1] * 30, icu_in=5)
        for s in windowize(rec, None):
            i = s.window_end_hour - 5
            np.testing.assert_array_equal(s.features, rec.features[i - 12 : i + 1].T)

    def test_label_interval(self):
        rec = make_record([1] * 40, icu_in=0)
        by_end = {s.window_end_hour: s.label for s in windowize(rec, 25)}
        assert by_end[24] == 1 and by_end[23] == 1
        assert by_end[22] == 0  # onset at e + 3
        assert 25 not in by_end

    def test_no_post_onset_windows(self, rng):
        for _ in range(100):
            n = int(rng.integers(15, 60))
            rec = make_record([1] * n, icu_in=int(rng.integers(0, 10)), rng=rng)
            onset = int(rec.icu_in_hour + rng.integers(0, n))
            hz = int(rng.integers(1, 4))
            out = windowize(rec, onset, lookback=int(rng.integers(1, 14)), horizon=hz)
            assert all(s.window_end_hour < onset for s in out)
            assert all(s.label == int(onset <= s.window_end_hour + hz) for s in out)

    def test_enumeration_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 40))
            icu_in = int(rng.integers(0, 20))
            rec = make_record([1] * n, icu_in=icu_in, rng=rng)
            lb, hz = int(rng.integers(1, 14)), int(rng.integers(1, 4))
            onset = None if rng.random() < 0.3 else int(icu_in + rng.integers(0, n + 3))
            expected = []
            for e in range(icu_in, icu_in + n):
                if e - lb + 1 < icu_in or e + hz > icu_in + n - 1:
                    continue
                if onset is not None and e >= onset:
                    continue
                expected.append((e, int(onset is not None and e < onset <= e + hz)))
            got = [(s.window_end_hour, s.label) for s in windowize(rec, onset, lb, hz)]
            assert got == expected

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            windowize(make_record([1] * 20), None, lookback=0)


class TestGenerator:
    def test_no_septic(self):
        recs = generate_cohort(CohortConfig(n_patients=40, septic_fraction=0.0, seed=3))
        assert all(label_sepsis_onset(r) is None for r in recs)

    def test_all_septic(self):
        recs = generate_cohort(CohortConfig(n_patients=50, septic_fraction=1.0, seed=3))
        assert all(label_sepsis_onset(r) is not None for r in recs)

    @pytest.mark.parametrize("seed", range(4))
    def test_septic_fraction_exact(self, seed):
        cfg = CohortConfig(n_patients=60, septic_fraction=0.35, seed=seed)
        recs = generate_cohort(cfg)
        assert sum(label_sepsis_onset(r) is not None for r in recs) == cfg.n_septic == 21

    def test_valid_records(self):
        for rec in generate_cohort(CohortConfig(n_patients=30, seed=1)):
            rec.validate()
            assert rec.n_hours >= 24

    def test_deterministic(self):
        a = generate_cohort(CohortConfig(n_patients=20, seed=9))
        b = generate_cohort(CohortConfig(n_patients=20, seed=9))
        assert a == b
        assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))
        assert a != generate_cohort(CohortConfig(n_patients=20, seed=10))

    def test_per_patient_streams(self):
        # a stay depends only on (seed, index, septic flag), not on cohort size
        a = generate_cohort(CohortConfig(n_patients=10, seed=2))
        b = generate_cohort(CohortConfig(n_patients=30, seed=2))
        same = [(x, y) for x, y in zip(a, b)
                if (label_sepsis_onset(x) is None) == (label_sepsis_onset(y) is None)]
        assert same
        assert all(x == y for x, y in same)

    def test_ramps_disabled_still_labels(self):
        recs = generate_cohort(CohortConfig(n_patients=20, seed=0, ramps_enabled=False))
        assert sum(label_sepsis_onset(r) is not None for r in recs) == 10

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(min_stay_hours=10, max_stay_hours=12),
            dict(septic_fraction=1.5),
            dict(max_stay_hours=16, min_stay_hours=15),
            dict(n_patients=-1),
        ],
    )
    def test_infeasible(self, kwargs):
        with pytest.raises(ConfigError):
            CohortConfig(**kwargs)


def samples_for(n_patients, per_patient=3):
    rec = [make_record([1] * (12 + per_patient + 2), pid=f"P{i:02d}", rng=np.random.default_rng(i))
           for i in range(n_patients)]
    return build_samples(rec)


class TestSplit:
    def test_ten_patients(self):
        train, test = split_train_test(samples_for(10), 0.8, seed=0)
        assert len({s.patient_id for s in train}) == 8
        assert len({s.patient_id for s in test}) == 2

    @pytest.mark.parametrize("seed", range(20))
    def test_no_leakage(self, seed):
        train, test = split_train_test(samples_for(7), 0.8, seed=seed)
        assert not {s.patient_id for s in train} & {s.patient_id for s in test}
        assert len(train) + len(test) == 21

    def test_deterministic(self):
        s = samples_for(12)
        a = split_train_test(s, 0.8, 4)
        b = split_train_test(s, 0.8, 4)
        assert [x.patient_id for x in a[0]] == [x.patient_id for x in b[0]]

    def test_order_independent(self):
        ids = [f"P{i}" for i in range(9)]
        assert split_patients(ids, 0.5, 1) == split_patients(ids[::-1] + ids, 0.5, 1)

    def test_too_few_patients(self):
        with pytest.raises(DataError):
            split_train_test(samples_for(1), 0.8, 0)
        with pytest.raises(DataError):
            split_train_test([], 0.8, 0)


class TestCsv:
    def test_round_trip(self, tmp_path):
        recs = generate_cohort(CohortConfig(n_patients=15, seed=4))
        path = tmp_path / "c.csv"
        save_cohort_csv(recs, path)
        back = load_cohort_csv(path)
        assert back == recs
        save_cohort_csv(back, tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_bytes() == path.read_bytes()

    def test_header_only(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text(",".join(CSV_COLUMNS) + "\n")
        assert load_cohort_csv(path) == []

    def _write(self, tmp_path, recs, edit):
        path = tmp_path / "x.csv"
        save_cohort_csv(recs, path)
        lines = path.read_text().splitlines()
        edit(lines)
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_sofa_out_of_range(self, tmp_path):
        recs = [make_record([1] * 4, icu_in=0, pid="A")]

        def edit(lines):
            cells = lines[3].split(",")
            cells[CSV_COLUMNS.index("sofa")] = "25"
            lines[3] = ",".join(cells)

        with pytest.raises(FormatError, match="row 4"):
            load_cohort_csv(self._write(tmp_path, recs, edit))

    def test_age_below_18(self, tmp_path):
        def edit(lines):
            cells = lines[1].split(",")
            cells[CSV_COLUMNS.index("age")] = "17"
            lines[1] = ",".join(cells)

        with pytest.raises(FormatError, match="row 2"):
            load_cohort_csv(self._write(tmp_path, [make_record([1] * 3, icu_in=0)], edit))

    def test_missing_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(c for c in CSV_COLUMNS if c != "paco2") + "\n")
        with pytest.raises(FormatError, match="paco2"):
            load_cohort_csv(path)

    def test_non_monotone_hours(self, tmp_path):
        def edit(lines):
            lines[2], lines[3] = lines[3], lines[2]

        with pytest.raises(FormatError, match="row 3"):
            load_cohort_csv(self._write(tmp_path, [make_record([1] * 4, icu_in=0)], edit))

    def test_channel_order(self):
        assert CSV_COLUMNS[2:11] == CHANNELS


class TestStandardize:
    def test_train_moments(self, rng):
        X = rng.normal(3.0, 7.0, size=(40, 9, 13))
        Z, mean, std = standardize_features(X, X)
        np.testing.assert_allclose(Z.mean(axis=(0, 2)), 0.0, atol=1e-9)
        np.testing.assert_allclose(Z.std(axis=(0, 2)), 1.0, atol=1e-9)

    def test_constant_channel(self, rng):
        X = rng.normal(size=(10, 9, 13))
        X[:, 0, :] = 65.0
        Z, _, std = standardize_features(X, X)
        assert std[0] == 1.0
        np.testing.assert_array_equal(Z[:, 0, :], 0.0)

    def test_fit_on_train_only(self, rng):
        Xtr = rng.normal(size=(20, 9, 13))
        Xte = rng.normal(5.0, 3.0, size=(8, 9, 13))
        Z, mean, std = standardize_features(Xtr, np.concatenate([Xtr, Xte]))
        again = fit_standardizer(Xtr)
        np.testing.assert_array_equal(mean, again.mean)
        np.testing.assert_array_equal(Z[20:], again.transform(Xte))

    def test_empty_train(self):
        with pytest.raises(DataError):
            fit_standardizer(np.zeros((0, 9, 13)))


def test_no_future_leakage():
    recs = generate_cohort(CohortConfig(n_patients=12, seed=5))
    for rec in recs:
        onset = label_sepsis_onset(rec)
        for s in windowize(rec, onset):
            i = s.window_end_hour - rec.icu_in_hour
            # the newest column is the end hour itself, never later
            np.testing.assert_array_equal(s.features[:, -1], rec.features[i])
            if onset is not None:
                assert s.window_end_hour < onset


def test_samples_to_arrays_shapes():
    X, y, ids = samples_to_arrays(samples_for(3))
    assert X.shape == (9, 9, 13) and y.shape == (9,) and len(ids) == 9
    X0, y0, _ = samples_to_arrays([])
    assert X0.shape == (0, 9, 13) and y0.shape == (0,)
