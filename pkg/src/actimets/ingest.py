"""Accelerometry and risk-factor ingestion.

Parses per-minute count files, derives per-day MVPA minutes and wear time,
validates demographic and risk-factor panels, and applies the cohort rules:
the activity-model cohort needs seven full wear days, and the risk-factor
cohort additionally needs a complete panel.

Count thresholds follow the standard cut-point convention: a minute is MVPA
when counts >= 2020; counts >= 5999 would also be vigorous, a subset that is
never double counted.  Nonwear is any run of >= 60 consecutive zero-count
minutes (missing minutes are treated as zeros), and a day is full when wear
time reaches 10 hours.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "Cohorts",
    "DayActivity",
    "EDUCATION_LEVELS",
    "FULL_DAY_WEAR_MINUTES",
    "LOG_SCALE_INDICES",
    "MINUTES_PER_DAY",
    "MODERATE_THRESHOLD",
    "MinuteRecord",
    "NONWEAR_RUN_MINUTES",
    "Participant",
    "RACE_LEVELS",
    "RISK_FACTORS",
    "RiskFactorPanel",
    "SEX_LEVELS",
    "VIGOROUS_THRESHOLD",
    "assign_cohorts",
    "build_cohorts",
    "default_covariates",
    "derive_day_activities",
    "derive_mvpa_minutes",
    "design_matrix",
    "read_demographics_csv",
    "read_minute_csv",
    "read_risk_panel_csv",
    "wear_minutes_from_counts",
    "write_minute_csv",
]

MODERATE_THRESHOLD = 2020
VIGOROUS_THRESHOLD = 5999
NONWEAR_RUN_MINUTES = 60
FULL_DAY_WEAR_MINUTES = 600
MINUTES_PER_DAY = 1440

SEX_LEVELS = ("male", "female")
RACE_LEVELS = ("mexican_american", "other_hispanic", "white", "black", "other")
EDUCATION_LEVELS = (
    "lt_9th_grade",
    "grade_9_to_11",
    "hs_diploma",
    "some_college",
    "college_graduate",
    "other",
)

# Canonical risk factor order used everywhere downstream.  Glucose and
# triglycerides enter the model on the log scale.
RISK_FACTORS = ("waist", "glucose", "triglycerides", "sbp", "dbp", "ldl", "hdl")
LOG_SCALE_INDICES = (1, 2)

MINUTE_HEADER = ("participant_id", "day_index", "day_of_week", "minute", "counts")


@dataclass(frozen=True)
class MinuteRecord:
    """One accelerometer minute."""

    participant_id: str
    day_index: int
    day_of_week: int
    minute_of_day: int
    counts: int

    def __post_init__(self):
        if not 1 <= self.day_index <= 7:
            raise DataError(f"day_index must be in 1..7, got {self.day_index}")
        if not 1 <= self.day_of_week <= 7:
            raise DataError(f"day_of_week must be in 1..7, got {self.day_of_week}")
        if not 0 <= self.minute_of_day <= 1439:
            raise DataError(f"minute_of_day must be in 0..1439, got {self.minute_of_day}")
        if self.counts < 0:
            raise DataError(f"counts must be non-negative, got {self.counts}")


@dataclass(frozen=True)
class DayActivity:
    """Per-day wear time and MVPA minutes; ``is_full_day`` is derived."""

    participant_id: str
    day_index: int
    day_of_week: int
    wear_minutes: int
    mvpa_minutes: float
    is_full_day: bool = field(init=False)

    def __post_init__(self):
        if not 0 <= self.wear_minutes <= MINUTES_PER_DAY:
            raise DataError(f"wear_minutes out of range: {self.wear_minutes}")
        if not 0 <= self.mvpa_minutes <= self.wear_minutes:
            raise DataError(
                f"mvpa_minutes must lie in [0, wear_minutes], got "
                f"{self.mvpa_minutes} with wear {self.wear_minutes} "
                f"({self.participant_id} day {self.day_index})"
            )
        object.__setattr__(self, "is_full_day", self.wear_minutes >= FULL_DAY_WEAR_MINUTES)


@dataclass
class Participant:
    """Demographics plus the covariate vector used by both model stages."""

    participant_id: str
    age: float
    sex: str
    race: str
    education: str
    bmi: float
    covariates: np.ndarray | None = field(default=None, repr=False, compare=False)
    cohort: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.age < 18:
            raise DataError(f"{self.participant_id}: adult cohort requires age >= 18, got {self.age}")
        if self.sex not in SEX_LEVELS:
            raise DataError(f"{self.participant_id}: unknown sex {self.sex!r}")
        if self.race not in RACE_LEVELS:
            raise DataError(f"{self.participant_id}: unknown race {self.race!r}")
        if self.education not in EDUCATION_LEVELS:
            raise DataError(f"{self.participant_id}: unknown education {self.education!r}")
        if not self.bmi > 0:
            raise DataError(f"{self.participant_id}: bmi must be positive, got {self.bmi}")
        if self.covariates is not None:
            z = np.asarray(self.covariates, dtype=float)
            if z.shape != (8,):
                raise DataError(f"{self.participant_id}: covariate vector must have length 8")
            self.covariates = z


@dataclass(frozen=True)
class RiskFactorPanel:
    """The seven risk factor measurements with the participant's survey weight."""

    participant_id: str
    waist_cm: float
    glucose_mgdl: float
    triglycerides_mgdl: float
    sbp_mmhg: float
    dbp_mmhg: float
    ldl_mgdl: float
    hdl_mgdl: float
    survey_weight: float

    def __post_init__(self):
        for name, value in zip(RISK_FACTORS, self.raw_values()):
            if not (math.isfinite(value) and value > 0):
                raise DataError(f"{self.participant_id}: {name} must be finite and positive, got {value}")
        if not (math.isfinite(self.survey_weight) and self.survey_weight > 0):
            raise DataError(f"{self.participant_id}: survey_weight must be positive")

    def raw_values(self):
        """Measurements in canonical order on the raw (measurement) scale."""
        return np.array(
            [
                self.waist_cm,
                self.glucose_mgdl,
                self.triglycerides_mgdl,
                self.sbp_mmhg,
                self.dbp_mmhg,
                self.ldl_mgdl,
                self.hdl_mgdl,
            ]
        )

    def model_values(self):
        """Measurements on the model scale (glucose and triglycerides logged)."""
        y = self.raw_values()
        y[list(LOG_SCALE_INDICES)] = np.log(y[list(LOG_SCALE_INDICES)])
        return y


@dataclass(frozen=True)
class Cohorts:
    """Sorted participant ids for each model stage; rfm_ids ⊆ mem_ids."""

    mem_ids: tuple
    rfm_ids: tuple

    def __post_init__(self):
        if not set(self.rfm_ids) <= set(self.mem_ids):
            raise DataError("risk-factor cohort must be a subset of the activity cohort")


def wear_minutes_from_counts(counts, nonwear_run=NONWEAR_RUN_MINUTES):
    """Wear minutes in a 1440-long counts array.

    Any run of ``nonwear_run`` or more consecutive zero minutes counts as
    nonwear; everything else is wear.
    """
    counts = np.asarray(counts)
    if counts.shape != (MINUTES_PER_DAY,):
        raise DataError(f"expected {MINUTES_PER_DAY} minutes, got shape {counts.shape}")
    is_zero = np.r_[False, counts == 0, False]
    edges = np.flatnonzero(np.diff(is_zero.astype(np.int8)))
    starts, ends = edges[::2], edges[1::2]
    run_lengths = ends - starts
    nonwear = int(run_lengths[run_lengths >= nonwear_run].sum())
    return MINUTES_PER_DAY - nonwear


def derive_mvpa_minutes(
    records,
    moderate_threshold=MODERATE_THRESHOLD,
    nonwear_run=NONWEAR_RUN_MINUTES,
):
    """Collapse one participant-day of minute records into a `DayActivity`.

    Parameters
    ----------
    records : list of MinuteRecord
        All minutes for a single participant-day; missing minutes are
        treated as zero counts.
    moderate_threshold : int
        Counts at or above this are MVPA minutes.  Vigorous minutes (counts
        at or above the vigorous cut point) are a subset and counted once.
    nonwear_run : int
        Minimum length of a zero run that counts as nonwear.

    Returns
    -------
    DayActivity
    """
    if not records:
        raise DataError("no minute records supplied")
    keys = {(r.participant_id, r.day_index, r.day_of_week) for r in records}
    if len(keys) != 1:
        raise DataError(f"records span multiple participant-days: {sorted(keys)}")
    pid, day_index, day_of_week = next(iter(keys))
    counts = np.zeros(MINUTES_PER_DAY, dtype=np.int64)
    seen = np.zeros(MINUTES_PER_DAY, dtype=bool)
    for r in records:
        if seen[r.minute_of_day]:
            raise DataError(f"{pid} day {day_index}: duplicate minute {r.minute_of_day}")
        seen[r.minute_of_day] = True
        counts[r.minute_of_day] = r.counts
    return DayActivity(
        participant_id=pid,
        day_index=day_index,
        day_of_week=day_of_week,
        wear_minutes=wear_minutes_from_counts(counts, nonwear_run),
        mvpa_minutes=float(np.count_nonzero(counts >= moderate_threshold)),
    )


def derive_day_activities(records, **kwargs):
    """Group minute records by participant-day and derive each `DayActivity`.

    Output is sorted by (participant_id, day_index) for determinism.
    """
    grouped = {}
    for r in records:
        grouped.setdefault((r.participant_id, r.day_index), []).append(r)
    return [derive_mvpa_minutes(grouped[k], **kwargs) for k in sorted(grouped)]


def build_cohorts(days, panels):
    """Apply the cohort validity rules.

    The activity-model cohort contains participants with seven full days;
    the risk-factor cohort is the subset that also has a complete panel.
    Panels for participants absent from the accelerometry produce a warning
    and are excluded.
    """
    full_days = {}
    seen_days = set()
    for d in days:
        key = (d.participant_id, d.day_index)
        if key in seen_days:
            raise DataError(f"duplicate day: participant {d.participant_id} day {d.day_index}")
        seen_days.add(key)
        full_days.setdefault(d.participant_id, 0)
        if d.is_full_day:
            full_days[d.participant_id] += 1
    mem_ids = sorted(pid for pid, n in full_days.items() if n == 7)

    panel_ids = set()
    for p in panels:
        if p.participant_id in panel_ids:
            raise DataError(f"duplicate risk factor panel for participant {p.participant_id}")
        panel_ids.add(p.participant_id)
        if p.participant_id not in full_days:
            warnings.warn(
                f"participant {p.participant_id} has a risk factor panel but no "
                "accelerometry; excluded",
                stacklevel=2,
            )
    rfm_ids = sorted(set(mem_ids) & panel_ids)
    return Cohorts(mem_ids=tuple(mem_ids), rfm_ids=tuple(rfm_ids))


def assign_cohorts(participants, cohorts):
    """Stamp each participant's cohort field in place."""
    rfm = set(cohorts.rfm_ids)
    mem = set(cohorts.mem_ids)
    for p in participants:
        if p.participant_id in rfm:
            p.cohort = "MEM_AND_RFM"
        elif p.participant_id in mem:
            p.cohort = "MEM_ONLY"
        else:
            p.cohort = None


def default_covariates(participant):
    """Default 8-column design row.

    Intercept, age/100, female indicator, BMI/10, and four race indicators
    (the first listed race level is the reference).  Education is not in
    the default design; pass a custom builder to `design_matrix` to change
    the encoding.
    """
    race_dummies = [1.0 if participant.race == level else 0.0 for level in RACE_LEVELS[1:]]
    return np.array(
        [
            1.0,
            participant.age / 100.0,
            1.0 if participant.sex == "female" else 0.0,
            participant.bmi / 10.0,
            *race_dummies,
        ]
    )


def design_matrix(participants, builder=default_covariates):
    """Stack covariate rows for the given participants, filling `covariates`.

    Rows honor a participant's preset `covariates` vector when present;
    otherwise `builder` supplies it and the result is cached on the
    participant.
    """
    rows = []
    for p in participants:
        if p.covariates is None:
            z = np.asarray(builder(p), dtype=float)
            if z.shape != (8,):
                raise DataError(
                    f"covariate builder returned shape {z.shape} for {p.participant_id}; expected (8,)"
                )
            p.covariates = z
        rows.append(p.covariates)
    return np.array(rows, dtype=float).reshape(len(rows), 8)


def _parse_int(text, lineno, path, column):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: {column} is not an integer: {text!r}") from None


def _parse_float(text, lineno, path, column):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: {column} is not a number: {text!r}") from None


def _read_header(reader, expected, path):
    # Leading "#" rows (the config-hash stamp) are skipped; returns the
    # line number of the first data row.
    lineno = 1
    row = next(reader, None)
    while row is not None and row and row[0].startswith("#"):
        lineno += 1
        row = next(reader, None)
    if row is None or tuple(row) != tuple(expected):
        raise DataError(f"{path}:{lineno}: expected header {','.join(expected)}")
    return lineno + 1


def read_minute_csv(path):
    """Read a per-minute counts CSV; malformed rows raise line-numbered errors."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        start = _read_header(reader, MINUTE_HEADER, path)
        for lineno, row in enumerate(reader, start=start):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                records.append(
                    MinuteRecord(
                        participant_id=row[0],
                        day_index=_parse_int(row[1], lineno, path, "day_index"),
                        day_of_week=_parse_int(row[2], lineno, path, "day_of_week"),
                        minute_of_day=_parse_int(row[3], lineno, path, "minute"),
                        counts=_parse_int(row[4], lineno, path, "counts"),
                    )
                )
            except DataError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
    return records


def write_minute_csv(path, records):
    """Write minute records in the documented format (round-trips losslessly)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MINUTE_HEADER)
        for r in records:
            writer.writerow([r.participant_id, r.day_index, r.day_of_week, r.minute_of_day, r.counts])


DEMOGRAPHICS_HEADER = ("participant_id", "age", "sex", "race", "education", "bmi")


def read_demographics_csv(path):
    """Read the demographics CSV into `Participant` objects."""
    out = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        start = _read_header(reader, DEMOGRAPHICS_HEADER, path)
        for lineno, row in enumerate(reader, start=start):
            if not row:
                continue
            if len(row) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            if row[0] in seen:
                raise DataError(f"{path}:{lineno}: duplicate participant {row[0]}")
            seen.add(row[0])
            try:
                out.append(
                    Participant(
                        participant_id=row[0],
                        age=_parse_float(row[1], lineno, path, "age"),
                        sex=row[2],
                        race=row[3],
                        education=row[4],
                        bmi=_parse_float(row[5], lineno, path, "bmi"),
                    )
                )
            except DataError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
    return out


PANEL_HEADER = (
    "participant_id",
    "waist_cm",
    "glucose_mgdl",
    "triglycerides_mgdl",
    "sbp_mmhg",
    "dbp_mmhg",
    "ldl_mgdl",
    "hdl_mgdl",
    "survey_weight",
)


def read_risk_panel_csv(path):
    """Read the risk factor panel CSV; weights are kept as given."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        start = _read_header(reader, PANEL_HEADER, path)
        for lineno, row in enumerate(reader, start=start):
            if not row:
                continue
            if len(row) != 9:
                raise DataError(f"{path}:{lineno}: expected 9 fields, got {len(row)}")
            try:
                values = [_parse_float(v, lineno, path, col) for col, v in zip(PANEL_HEADER[1:], row[1:])]
                out.append(RiskFactorPanel(row[0], *values))
            except DataError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
    return out
