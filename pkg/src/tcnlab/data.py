"""Patient records, sepsis-onset labeling, windowing and the synthetic cohort.

A cohort is a list of :class:`PatientRecord`, one per ICU stay, with one
row of nine channels per hour of the stay (both ends inclusive). Samples
are ``[channels, lookback]`` windows labeled by whether onset falls within
the following ``horizon`` hours.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

CHANNELS = ("age", "sbp", "dbp", "spo2", "temp", "hr", "rr", "paco2", "sofa")
N_CHANNELS = len(CHANNELS)
SOFA = CHANNELS.index("sofa")
CSV_COLUMNS = ("patient_id", "hour") + CHANNELS + ("icu_in", "icu_out", "suspicion_hour")

LOOKBACK_HOURS = 13
HORIZON_HOURS = 2
WINDOW_BEFORE_SUSPICION = 48
WINDOW_AFTER_SUSPICION = 24
BASELINE_MODES = ("running_min", "first")


@dataclass(eq=False)
class PatientRecord:
    patient_id: str
    icu_in_hour: int
    icu_out_hour: int
    features: np.ndarray  # [n_hours, 9], columns in CHANNELS order
    suspicion_hour: int | None = None

    @property
    def n_hours(self):
        return self.icu_out_hour - self.icu_in_hour + 1

    @property
    def hours(self):
        return np.arange(self.icu_in_hour, self.icu_out_hour + 1)

    @property
    def sofa(self):
        return self.features[:, SOFA]

    def validate(self):
        if self.icu_out_hour < self.icu_in_hour:
            raise DataError(f"{self.patient_id}: icu_out before icu_in")
        if self.features.shape != (self.n_hours, N_CHANNELS):
            raise DataError(
                f"{self.patient_id}: features shape {self.features.shape}, "
                f"expected ({self.n_hours}, {N_CHANNELS})"
            )
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.patient_id}: missing or non-finite values")
        if np.any(self.features[:, CHANNELS.index("age")] < 18):
            raise DataError(f"{self.patient_id}: age below 18")
        sofa = self.sofa
        if np.any((sofa < 0) | (sofa > 24) | (sofa != np.round(sofa))):
            raise DataError(f"{self.patient_id}: SOFA must be an integer in [0, 24]")

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.icu_in_hour == other.icu_in_hour
            and self.icu_out_hour == other.icu_out_hour
            and self.suspicion_hour == other.suspicion_hour
            and np.array_equal(self.features, other.features)
        )

    def shifted(self, offset: int) -> "PatientRecord":
        sus = None if self.suspicion_hour is None else self.suspicion_hour + offset
        return PatientRecord(
            self.patient_id, self.icu_in_hour + offset, self.icu_out_hour + offset,
            self.features.copy(), sus,
        )


@dataclass
class Sample:
    features: np.ndarray  # [9, lookback], oldest hour first
    label: int
    patient_id: str
    window_end_hour: int


# ---------------------------------------------------------------------------
# Labeling and windowing
# ---------------------------------------------------------------------------


def suspicion_window(record: PatientRecord):
    """Hours ``[suspicion - 48, suspicion + 24]`` clamped to the stay, or None."""
    if record.suspicion_hour is None:
        return None
    lo = max(record.suspicion_hour - WINDOW_BEFORE_SUSPICION, record.icu_in_hour)
    hi = min(record.suspicion_hour + WINDOW_AFTER_SUSPICION, record.icu_out_hour)
    if lo > hi:
        return None
    return lo, hi


def label_sepsis_onset(record: PatientRecord, baseline: str = "running_min"):
    """First hour in the suspicion window where SOFA has risen by 2 or more.

    With ``baseline="running_min"`` the rise is measured against the lowest
    SOFA seen so far in the window; ``"first"`` measures against the
    window's first hour. Returns None when there is no such hour.
    """
    if baseline not in BASELINE_MODES:
        raise ConfigError(f"baseline must be one of {BASELINE_MODES}, got {baseline!r}")
    window = suspicion_window(record)
    if window is None:
        return None
    lo, hi = window
    sofa = record.sofa[lo - record.icu_in_hour : hi - record.icu_in_hour + 1]
    ref = sofa[0]
    for offset, value in enumerate(sofa):
        if baseline == "running_min":
            ref = min(ref, value)
        if value - ref >= 2:
            return lo + offset
    return None


def windowize(record: PatientRecord, onset, lookback=LOOKBACK_HOURS, horizon=HORIZON_HOURS):
    """Cut a record into labeled lookback windows.

    A window ending at hour ``e`` covers ``[e - lookback + 1, e]`` and is
    positive iff ``e < onset <= e + horizon``. Windows ending at or after
    onset are not emitted.
    """
    if lookback < 1 or horizon < 1:
        raise ConfigError("lookback and horizon must be >= 1")
    samples = []
    first_end = record.icu_in_hour + lookback - 1
    last_end = record.icu_out_hour - horizon
    for end in range(first_end, last_end + 1):
        if onset is not None and end >= onset:
            break
        i = end - record.icu_in_hour
        feats = np.ascontiguousarray(record.features[i - lookback + 1 : i + 1].T)
        label = int(onset is not None and end < onset <= end + horizon)
        samples.append(Sample(feats, label, record.patient_id, end))
    return samples


def build_samples(records, lookback=LOOKBACK_HOURS, horizon=HORIZON_HOURS, baseline="running_min"):
    out = []
    for rec in records:
        out.extend(windowize(rec, label_sepsis_onset(rec, baseline), lookback, horizon))
    return out


def samples_to_arrays(samples, lookback=None):
    """Stack samples into ``X [n, 9, lookback]``, ``y [n]`` and patient ids."""
    if not samples:
        T = lookback or LOOKBACK_HOURS
        return np.zeros((0, N_CHANNELS, T)), np.zeros(0, dtype=np.int64), []
    X = np.stack([s.features for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y, [s.patient_id for s in samples]


# ---------------------------------------------------------------------------
# Splitting and scaling
# ---------------------------------------------------------------------------


_SPLIT_STREAM = 2
_ASSIGN_STREAM = 0
_PATIENT_STREAM = 1


def split_patients(patient_ids, ratio=0.8, seed=0):
    """Deterministically assign unique patient ids to (train, test) sets."""
    unique = sorted(set(patient_ids))
    if len(unique) < 2:
        raise DataError(f"need at least 2 patients to split, got {len(unique)}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    # keyed stream so a shared seed does not reuse the generator's permutation
    order = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(len(unique))
    n_train = min(max(int(round(ratio * len(unique))), 1), len(unique) - 1)
    train = {unique[i] for i in order[:n_train]}
    test = {unique[i] for i in order[n_train:]}
    return train, test


def split_train_test(samples, ratio=0.8, seed=0):
    """Patient-level split: every window of a patient lands on one side."""
    if not samples:
        raise DataError("cannot split an empty sample set")
    train_ids, _ = split_patients([s.patient_id for s in samples], ratio, seed)
    train = [s for s in samples if s.patient_id in train_ids]
    test = [s for s in samples if s.patient_id not in train_ids]
    return train, test


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X):
        return (X - self.mean[None, :, None]) / self.std[None, :, None]


def fit_standardizer(X_train) -> Standardizer:
    """Per-channel mean/std over samples and time; constant channels get unit divisor."""
    if len(X_train) == 0:
        raise DataError("cannot fit standardization on an empty training set")
    mean = X_train.mean(axis=(0, 2))
    std = X_train.std(axis=(0, 2))
    tiny = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(tiny, 1.0, std)
    return Standardizer(mean, std)


def standardize_features(X_train, X_all):
    """Fit on ``X_train`` only and apply to ``X_all``; returns ``(X_std, mean, std)``."""
    st = fit_standardizer(X_train)
    return st.transform(X_all), st.mean, st.std


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------

# channel: (population mean, between-patient sd, within-patient AR sd, decimals)
VITAL_PROFILE = {
    "sbp": (120.0, 25.0, 4.0, 1),
    "dbp": (68.0, 14.0, 3.0, 1),
    "spo2": (97.0, 2.5, 0.6, 1),
    "temp": (37.0, 0.8, 0.15, 2),
    "hr": (84.0, 20.0, 4.0, 1),
    "rr": (18.0, 5.0, 1.2, 1),
    "paco2": (40.0, 6.0, 1.5, 1),
}
# channel: (low, high) magnitude of the shift at full deterioration; sign applied separately
RAMP_SHIFT = {
    "sbp": (-25.0, -12.0),
    "dbp": (-12.0, -6.0),
    "spo2": (-4.0, -2.0),
    "hr": (15.0, 30.0),
    "rr": (4.0, 8.0),
    "paco2": (-7.0, -3.0),
}
CLIP = {"spo2": (60.0, 100.0), "temp": (32.0, 42.0), "sbp": (50.0, 220.0), "dbp": (25.0, 140.0),
        "hr": (30.0, 200.0), "rr": (6.0, 50.0), "paco2": (15.0, 90.0)}


@dataclass(frozen=True)
class CohortConfig:
    """Knobs of the synthetic ICU cohort.

    Septic stays carry a deterioration ramp ending at onset: heart and
    respiratory rate rise, blood pressure, SpO2 and PaCO2 fall, and
    temperature drifts towards fever or hypothermia. Any stay may contain
    short stress episodes with the same haemodynamic pattern but no
    temperature drift, and isolated temperature excursions. Telling these
    apart from a ramp takes the shape of the whole window.
    """

    n_patients: int = 300
    septic_fraction: float = 0.5
    min_stay_hours: int = 24
    max_stay_hours: int = 72
    ar_coefficient: float = 0.8
    ramp_hours: tuple = (8, 12)
    ramp_exponent: tuple = (1.0, 1.0)
    temp_shift: tuple = (2.0, 3.0)
    fever_fraction: float = 0.5
    episode_hours: tuple = (1.5, 4.0)
    stress_episode_rate: float = 0.047
    fever_episode_rate: float = 1 / 36
    suspicion_without_sepsis_prob: float = 0.3
    ramps_enabled: bool = True
    lookback: int = LOOKBACK_HOURS
    horizon: int = HORIZON_HOURS
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if not 0.0 <= self.septic_fraction <= 1.0:
            raise ConfigError("septic_fraction must be in [0, 1]")
        if not 0.0 <= self.ar_coefficient < 1.0:
            raise ConfigError("ar_coefficient must be in [0, 1)")
        lo, hi = self.ramp_hours
        if not 1 <= lo <= hi:
            raise ConfigError("ramp_hours must satisfy 1 <= low <= high")
        if self.min_stay_hours > self.max_stay_hours:
            raise ConfigError("min_stay_hours exceeds max_stay_hours")
        if self.min_stay_hours < self.lookback + self.horizon:
            raise ConfigError(
                f"stays of {self.min_stay_hours}h are shorter than lookback + horizon "
                f"({self.lookback + self.horizon}h)"
            )
        if self.septic_fraction > 0 and self.max_stay_hours < self.min_onset_offset + 3:
            raise ConfigError(
                f"max_stay_hours={self.max_stay_hours} leaves no room for onset "
                f"at or after hour {self.min_onset_offset} of the stay"
            )

    @property
    def min_onset_offset(self):
        """Earliest onset, in hours after ICU admission, for a septic stay."""
        return max(self.lookback + self.horizon, self.ramp_hours[1] + 4)

    @property
    def n_septic(self):
        return int(round(self.septic_fraction * self.n_patients))


def _ar1(rng, n, sd, phi):
    out = np.empty(n)
    innov = rng.normal(0.0, sd * math.sqrt(1.0 - phi * phi), size=n)
    out[0] = rng.normal(0.0, sd)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + innov[t]
    return out


def _ramp(n, end, length, exponent):
    """0 before ``end - length``, rising to 1 at ``end``, held at 1 afterwards."""
    t = np.arange(n, dtype=np.float64)
    return np.clip((t - (end - length)) / length, 0.0, 1.0) ** exponent


def _episode(n, start, length, rng):
    """Rise over ``length`` hours from ``start``, then decay back."""
    t = np.arange(n, dtype=np.float64)
    up = np.clip((t - start) / length, 0.0, 1.0) ** rng.uniform(1.2, 2.0)
    decay = np.exp(-np.clip(t - start - length, 0.0, None) / rng.uniform(3.0, 8.0))
    return up * decay


def _sofa_toggle(rng, n, base, switch_prob=0.08):
    extra = np.zeros(n, dtype=np.int64)
    state = 0
    for t in range(n):
        if rng.random() < switch_prob:
            state = 1 - state
        extra[t] = state
    return base + extra


def _make_patient(config: CohortConfig, idx: int, septic: bool) -> PatientRecord:
    rng = np.random.default_rng([config.seed, _PATIENT_STREAM, idx])
    pid = f"P{idx:05d}"
    icu_in = int(rng.integers(0, 48))

    if septic:
        stay = int(rng.integers(max(config.min_stay_hours, config.min_onset_offset + 3),
                                config.max_stay_hours + 1))
        onset_off = int(rng.integers(config.min_onset_offset, stay - 2))
    else:
        stay = int(rng.integers(config.min_stay_hours, config.max_stay_hours + 1))
        onset_off = None
    n = stay
    feats = np.empty((n, N_CHANNELS))

    age = float(np.clip(np.round(rng.normal(64.0, 15.0)), 18, 95))
    feats[:, CHANNELS.index("age")] = age

    shifts = {c: np.zeros(n) for c in VITAL_PROFILE}
    if config.ramps_enabled:
        if septic:
            length = rng.uniform(*config.ramp_hours)
            r = _ramp(n, onset_off, length, rng.uniform(*config.ramp_exponent))
            for c, (lo, hi) in RAMP_SHIFT.items():
                shifts[c] += rng.uniform(lo, hi) * r
            sign = 1.0 if rng.random() < config.fever_fraction else -1.0
            shifts["temp"] += sign * rng.uniform(*config.temp_shift) * r
        for _ in range(rng.poisson(n * config.stress_episode_rate)):
            length = rng.uniform(*config.episode_hours)
            e = _episode(n, rng.uniform(-length / 2, n - length / 2), length, rng)
            for c, (lo, hi) in RAMP_SHIFT.items():
                shifts[c] += rng.uniform(lo, hi) * e
        for _ in range(rng.poisson(n * config.fever_episode_rate)):
            length = rng.uniform(*config.episode_hours)
            e = _episode(n, rng.uniform(-length / 2, n - length / 2), length, rng)
            sign = 1.0 if rng.random() < config.fever_fraction else -1.0
            shifts["temp"] += sign * rng.uniform(*config.temp_shift) * e

    for c, (mu, between, within, decimals) in VITAL_PROFILE.items():
        base = rng.normal(mu, between)
        series = base + _ar1(rng, n, within, config.ar_coefficient) + shifts[c]
        lo, hi = CLIP[c]
        feats[:, CHANNELS.index(c)] = np.round(np.clip(series, lo, hi), decimals)

    base_sofa = int(rng.integers(0, 7))
    sofa = _sofa_toggle(rng, n, base_sofa)
    suspicion = None
    if septic:
        pre_step = int(rng.integers(1, 7))
        sofa[onset_off - pre_step - 1] = base_sofa
        sofa[onset_off - pre_step : onset_off] = base_sofa + 1
        sofa[onset_off:] = base_sofa + 2
        later = onset_off + int(rng.integers(2, 12))
        sofa[later:] = base_sofa + 3
        suspicion = icu_in + onset_off + int(rng.integers(-12, 13))
    elif rng.random() < config.suspicion_without_sepsis_prob:
        suspicion = icu_in + int(rng.integers(0, n))
    feats[:, SOFA] = sofa

    rec = PatientRecord(pid, icu_in, icu_in + n - 1, feats, suspicion)
    rec.validate()
    return rec


def generate_cohort(config: CohortConfig):
    """Deterministic synthetic cohort; exactly ``config.n_septic`` stays meet the onset rule."""
    septic = np.zeros(config.n_patients, dtype=bool)
    if config.n_patients:
        chosen = np.random.default_rng([config.seed, _ASSIGN_STREAM]).permutation(config.n_patients)[: config.n_septic]
        septic[chosen] = True
    return [_make_patient(config, i, bool(septic[i])) for i in range(config.n_patients)]


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def save_cohort_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            sus = "" if rec.suspicion_hour is None else str(rec.suspicion_hour)
            for hour, row in zip(rec.hours, rec.features):
                values = [_fmt(v) for v in row[:SOFA]] + [str(int(row[SOFA]))]
                w.writerow([rec.patient_id, int(hour), *values, rec.icu_in_hour, rec.icu_out_hour, sus])


def _parse_int(text, col, line):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise FormatError(f"row {line}: column {col!r} must be an integer, got {text!r}") from None


def _parse_float(text, col, line):
    if text is None or text.strip() == "":
        raise FormatError(f"row {line}: missing value in column {col!r}")
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"row {line}: column {col!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise FormatError(f"row {line}: column {col!r} is not finite")
    return v


def load_cohort_csv(path):
    """Parse a cohort CSV. Errors name the offending file line (header is line 1)."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise FormatError(f"cohort CSV is missing columns: {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            pid = row["patient_id"]
            if not pid:
                raise FormatError(f"row {line}: empty patient_id")
            hour = _parse_int(row["hour"], "hour", line)
            vals = [_parse_float(row[c], c, line) for c in CHANNELS]
            sofa = vals[SOFA]
            if sofa != int(sofa) or not 0 <= sofa <= 24:
                raise FormatError(f"row {line}: SOFA must be an integer in [0, 24], got {row['sofa']}")
            if vals[0] < 18:
                raise FormatError(f"row {line}: age {row['age']} is below the inclusion minimum of 18")
            icu_in = _parse_int(row["icu_in"], "icu_in", line)
            icu_out = _parse_int(row["icu_out"], "icu_out", line)
            sus_text = (row["suspicion_hour"] or "").strip()
            sus = None if sus_text == "" else _parse_int(sus_text, "suspicion_hour", line)
            g = groups.get(pid)
            if g is None:
                if hour != icu_in:
                    raise FormatError(f"row {line}: first hour {hour} of {pid} is not icu_in {icu_in}")
                if icu_out < icu_in:
                    raise FormatError(f"row {line}: icu_out {icu_out} precedes icu_in {icu_in}")
                g = groups[pid] = dict(icu_in=icu_in, icu_out=icu_out, sus=sus, last=hour - 1, rows=[])
            if (icu_in, icu_out, sus) != (g["icu_in"], g["icu_out"], g["sus"]):
                raise FormatError(f"row {line}: stay fields of {pid} change between rows")
            if hour != g["last"] + 1:
                raise FormatError(
                    f"row {line}: hours of {pid} must increase by 1 (got {hour} after {g['last']})"
                )
            if hour > icu_out:
                raise FormatError(f"row {line}: hour {hour} is after icu_out {icu_out}")
            g["last"] = hour
            g["rows"].append(vals)
    records = []
    for pid, g in groups.items():
        if g["last"] != g["icu_out"]:
            raise FormatError(f"{pid}: rows end at hour {g['last']} but icu_out is {g['icu_out']}")
        rec = PatientRecord(pid, g["icu_in"], g["icu_out"], np.array(g["rows"], dtype=np.float64), g["sus"])
        records.append(rec)
    return records
