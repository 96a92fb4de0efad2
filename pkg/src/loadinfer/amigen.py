"""Synthetic AMI data generation, CSV ingestion and dataset partitioning.

A population is drawn from planted behavioral classes: each class owns a
smooth 24-point weekday shape and a distinct weekend shape. Customers get a
log-normal magnitude scale and multiplicative noise split into monthly,
daily and hourly factors. A "month" is normalized to exactly 28 days and all
series start on a Monday, so day positions within a week are fixed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CUSTOMER_TYPES = ("residential", "commercial", "industrial")
DAY_KINDS = ("weekday", "weekend")
HOURS_PER_DAY = 24
DAYS_PER_WEEK = 7
WEEKS_PER_MONTH = 4
DAYS_PER_MONTH = DAYS_PER_WEEK * WEEKS_PER_MONTH
HOURS_PER_MONTH = DAYS_PER_MONTH * HOURS_PER_DAY  # 672

# Monday-aligned start so day position p in [0,7) maps to weekday for p < 5
DEFAULT_START = np.datetime64("2015-01-05T00", "h")


class GenerationSpecError(ValueError):
    """Invalid population spec."""


class CsvSchemaError(ValueError):
    """AMI CSV does not match the documented schema."""


class IncompleteMonthError(ValueError):
    """A 28-day month is not fully covered by hourly data."""


@dataclass
class CustomerRecord:
    id: str
    type: str
    timestamps: np.ndarray   # datetime64[h], strictly increasing
    hourly_kwh: np.ndarray   # same length, >= 0
    true_class: int | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.hourly_kwh = np.asarray(self.hourly_kwh, dtype=float)
        if self.timestamps.shape != self.hourly_kwh.shape:
            raise ValueError("timestamps and hourly_kwh length mismatch")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= np.timedelta64(0, "h")):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(~np.isfinite(self.hourly_kwh)) or np.any(self.hourly_kwh < 0):
            raise ValueError("hourly_kwh must be finite and nonnegative")

    @property
    def start(self) -> np.datetime64:
        return self.timestamps[0]

    def is_contiguous(self) -> bool:
        if len(self.timestamps) < 2:
            return True
        return bool(np.all(np.diff(self.timestamps) == np.timedelta64(1, "h")))

    def day_positions(self) -> np.ndarray:
        """Day-of-week index (0 = Monday) for every sample."""
        days = self.timestamps.astype("datetime64[D]")
        # 1970-01-01 was a Thursday
        return (days.astype(int) + 3) % 7

    def month_slice(self, month: int) -> np.ndarray:
        """kWh values of normalized month ``month`` (28 days from start)."""
        t0 = self.start + np.timedelta64(month * HOURS_PER_MONTH, "h")
        want = t0 + np.arange(HOURS_PER_MONTH, dtype="timedelta64[h]")
        pos = np.searchsorted(self.timestamps, want)
        ok = (pos < len(self.timestamps)) & (self.timestamps[np.minimum(pos, len(self.timestamps) - 1)] == want)
        if not np.all(ok):
            raise IncompleteMonthError(
                f"customer {self.id}: month {month} missing {int(np.sum(~ok))} hours"
            )
        return self.hourly_kwh[pos]

    def n_full_months(self) -> int:
        if not self.is_contiguous():
            return 0
        return len(self.hourly_kwh) // HOURS_PER_MONTH


@dataclass(frozen=True)
class MonthlyBill:
    customer_id: str
    month: int
    energy_kwh: float


@dataclass
class DailyProfile:
    values: np.ndarray  # (24,)
    customer_id: str
    day_kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (HOURS_PER_DAY,):
            raise ValueError("DailyProfile needs exactly 24 values")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("profile values must be finite and nonnegative")


@dataclass
class DataSubset:
    customer_type: str
    day_kind: str
    profiles: list[DailyProfile] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.profiles)


@dataclass
class PopulationSpec:
    counts: dict[str, int]
    weekday_classes: dict[str, int]
    weekend_classes: dict[str, int]
    months: int = 3
    mean_daily_kwh: dict[str, float] = field(
        default_factory=lambda: {"residential": 30.0, "commercial": 500.0, "industrial": 2000.0}
    )
    scale_sigma: float = 0.3
    noise_sigma: float = 0.15
    # variance fractions of the monthly / daily / hourly noise factors
    noise_split: tuple[float, float, float] = (0.40, 0.25, 0.35)
    start: np.datetime64 = DEFAULT_START
    id_prefix: str = "cust"

    def validate(self) -> None:
        for t, c in self.counts.items():
            if t not in CUSTOMER_TYPES:
                raise GenerationSpecError(f"unknown customer type {t!r}")
            if c <= 0:
                raise GenerationSpecError(f"count for {t} must be positive")
            if self.weekday_classes.get(t, 0) < 1 or self.weekend_classes.get(t, 0) < 1:
                raise GenerationSpecError(f"need at least one class per day kind for {t}")
            if self.weekend_classes[t] < self.weekday_classes[t]:
                raise GenerationSpecError("weekend classes must be >= weekday classes")
        if self.months < 1:
            raise GenerationSpecError("months must be >= 1")
        if self.noise_sigma < 0:
            raise GenerationSpecError("noise sigma must be >= 0")
        if abs(sum(self.noise_split) - 1.0) > 1e-9:
            raise GenerationSpecError("noise_split fractions must sum to 1")


def _smooth_shape(rng: np.random.Generator) -> np.ndarray:
    """Smooth positive 24-point curve: offset plus 1-3 sinusoids, mean 1."""
    h = np.arange(HOURS_PER_DAY)
    n_terms = int(rng.integers(1, 4))
    shape = np.ones(HOURS_PER_DAY)
    for k in range(1, n_terms + 1):
        amp = rng.uniform(0.15, 0.55) / k
        phase = rng.uniform(0, 2 * np.pi)
        shape = shape + amp * np.sin(2 * np.pi * k * h / HOURS_PER_DAY + phase)
    shape = np.clip(shape, 0.05, None)
    return shape / shape.mean()


def _distinct_shapes(rng: np.random.Generator, n: int, min_dist: float = 0.055) -> list[np.ndarray]:
    """Draw n shapes whose unit-sum normalizations are pairwise separated."""
    shapes: list[np.ndarray] = []
    tries = 0
    while len(shapes) < n:
        cand = _smooth_shape(rng)
        cn = cand / cand.sum()
        if all(np.linalg.norm(cn - s / s.sum()) >= min_dist for s in shapes):
            shapes.append(cand)
        tries += 1
        if tries > 500 * n:
            raise GenerationSpecError(f"could not draw {n} sufficiently distinct shapes")
    return shapes


@dataclass
class ClassLibrary:
    """Planted class shapes per customer type.

    A class id indexes the weekend shape; its weekday shape is shared among
    classes via ``id % n_weekday`` so weekday behavior has fewer distinct
    patterns than weekend behavior.
    """
    weekday_shapes: dict[str, list[np.ndarray]]
    weekend_shapes: dict[str, list[np.ndarray]]
    weekend_energy_factor: dict[str, np.ndarray]  # per class, scales weekend days

    def n_classes(self, ctype: str) -> int:
        return len(self.weekend_shapes[ctype])

    def shape(self, ctype: str, class_id: int, day_kind: str) -> np.ndarray:
        if day_kind == "weekend":
            return self.weekend_shapes[ctype][class_id]
        return self.weekday_shapes[ctype][class_id % len(self.weekday_shapes[ctype])]


def make_class_library(spec: PopulationSpec, seed: int) -> ClassLibrary:
    spec.validate()
    ss = np.random.SeedSequence([seed, 0x5eed])
    rng = np.random.default_rng(ss)
    wd, we, wef = {}, {}, {}
    for ctype in sorted(spec.counts):
        wd[ctype] = _distinct_shapes(rng, spec.weekday_classes[ctype])
        we[ctype] = _distinct_shapes(rng, spec.weekend_classes[ctype])
        wef[ctype] = rng.uniform(0.7, 1.1, size=spec.weekend_classes[ctype])
    return ClassLibrary(wd, we, wef)


def _lognormal_factor(rng: np.random.Generator, sigma: float, size=None) -> np.ndarray:
    """Mean-one multiplicative log-normal factor."""
    if sigma == 0:
        return np.ones(size) if size is not None else 1.0
    return np.exp(rng.normal(0.0, sigma, size=size) - sigma * sigma / 2.0)


def generate_population(
    spec: PopulationSpec, seed: int, library: ClassLibrary | None = None
) -> list[CustomerRecord]:
    """Draw a deterministic synthetic population from planted classes."""
    spec.validate()
    lib = library or make_class_library(spec, seed)
    s_m = spec.noise_sigma * math.sqrt(spec.noise_split[0])
    s_d = spec.noise_sigma * math.sqrt(spec.noise_split[1])
    s_h = spec.noise_sigma * math.sqrt(spec.noise_split[2])
    n_hours = spec.months * HOURS_PER_MONTH
    timestamps = spec.start + np.arange(n_hours, dtype="timedelta64[h]")
    records: list[CustomerRecord] = []
    for ctype in sorted(spec.counts):
        n_cls = lib.n_classes(ctype)
        for i in range(spec.counts[ctype]):
            type_key = CUSTOMER_TYPES.index(ctype)
            rng = np.random.default_rng(np.random.SeedSequence([seed, type_key, i]))
            cls = i % n_cls
            scale = spec.mean_daily_kwh[ctype] / HOURS_PER_DAY * float(
                _lognormal_factor(rng, spec.scale_sigma)
            )
            kwh = np.empty(n_hours)
            for m in range(spec.months):
                fm = float(_lognormal_factor(rng, s_m))
                for d in range(DAYS_PER_MONTH):
                    pos = d % DAYS_PER_WEEK
                    kind = "weekday" if pos < 5 else "weekend"
                    shape = lib.shape(ctype, cls, kind)
                    fd = float(_lognormal_factor(rng, s_d))
                    fh = _lognormal_factor(rng, s_h, size=HOURS_PER_DAY)
                    day = scale * shape * fm * fd * fh
                    if kind == "weekend":
                        day = day * float(lib.weekend_energy_factor[ctype][cls])
                    lo = (m * DAYS_PER_MONTH + d) * HOURS_PER_DAY
                    kwh[lo:lo + HOURS_PER_DAY] = day
            records.append(
                CustomerRecord(
                    id=f"{spec.id_prefix}_{ctype[:3]}_{i:04d}",
                    type=ctype,
                    timestamps=timestamps.copy(),
                    hourly_kwh=kwh,
                    true_class=cls,
                )
            )
    return records


def partition_subsets(records: list[CustomerRecord]) -> dict[tuple[str, str], DataSubset]:
    """Split customers into the six (type x day kind) average-profile subsets."""
    subsets = {
        (t, k): DataSubset(customer_type=t, day_kind=k)
        for t in CUSTOMER_TYPES
        for k in DAY_KINDS
    }
    for rec in records:
        if rec.type not in CUSTOMER_TYPES:
            raise ValueError(f"customer {rec.id}: unknown type {rec.type!r}")
        pos = rec.day_positions()
        hours = (rec.timestamps - rec.timestamps.astype("datetime64[D]")).astype(int)
        for kind, mask in (("weekday", pos < 5), ("weekend", pos >= 5)):
            if not np.any(mask):
                continue
            prof = np.zeros(HOURS_PER_DAY)
            for h in range(HOURS_PER_DAY):
                sel = mask & (hours == h)
                prof[h] = rec.hourly_kwh[sel].mean() if np.any(sel) else 0.0
            subsets[(rec.type, kind)].profiles.append(
                DailyProfile(values=prof, customer_id=rec.id, day_kind=kind)
            )
    return subsets


def bill_from_truth(record: CustomerRecord, month: int) -> MonthlyBill:
    """Monthly bill as the exact sum of the customer's hourly truth."""
    values = record.month_slice(month)
    return MonthlyBill(customer_id=record.id, month=month, energy_kwh=float(values.sum()))


@dataclass
class CleaningReport:
    rows_read: int = 0
    rows_dropped: int = 0
    drop_reasons: dict[str, int] = field(default_factory=dict)
    gaps: dict[str, int] = field(default_factory=dict)  # customer id -> missing hours

    def note_drop(self, reason: str) -> None:
        self.rows_dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1


CSV_HEADER = ["customer_id", "timestamp_iso8601", "kwh", "type"]


def write_csv(records: list[CustomerRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for rec in records:
            for ts, val in zip(rec.timestamps, rec.hourly_kwh):
                w.writerow([rec.id, str(ts), repr(float(val)), rec.type])


def ingest_csv(path: str | Path) -> tuple[list[CustomerRecord], CleaningReport]:
    """Read AMI CSV; drop missing/negative readings and report the cleaning."""
    path = Path(path)
    report = CleaningReport()
    per_customer: dict[str, tuple[str, list[tuple[np.datetime64, float]]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise CsvSchemaError(f"{path}: empty file")
        if [c.strip() for c in header] != CSV_HEADER:
            raise CsvSchemaError(f"{path}: expected header {CSV_HEADER}, got {header}")
        for row in reader:
            report.rows_read += 1
            if len(row) != 4:
                report.note_drop("bad_row")
                continue
            cid, ts_raw, kwh_raw, ctype = row
            if ctype not in CUSTOMER_TYPES:
                report.note_drop("unknown_type")
                continue
            try:
                ts = np.datetime64(ts_raw, "h")
            except ValueError:
                report.note_drop("bad_timestamp")
                continue
            try:
                kwh = float(kwh_raw)
            except ValueError:
                report.note_drop("bad_value")
                continue
            if not math.isfinite(kwh):
                report.note_drop("missing_value")
                continue
            if kwh < 0:
                report.note_drop("negative_value")
                continue
            per_customer.setdefault(cid, (ctype, []))[1].append((ts, kwh))
    if not per_customer:
        raise CsvSchemaError(f"{path}: no valid rows")
    records = []
    for cid in sorted(per_customer):
        ctype, samples = per_customer[cid]
        samples.sort(key=lambda p: p[0])
        ts = np.array([p[0] for p in samples], dtype="datetime64[h]")
        kwh = np.array([p[1] for p in samples])
        span = int((ts[-1] - ts[0]).astype(int)) + 1
        missing = span - len(ts)
        if missing > 0:
            report.gaps[cid] = missing
        records.append(CustomerRecord(id=cid, type=ctype, timestamps=ts, hourly_kwh=kwh))
    return records, report
