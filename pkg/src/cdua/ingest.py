"""Charging-log ingestion: parse, segment, validate, Coulomb-count, aggregate weekly, smooth."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_WEEK = 604800
NOMINAL_INTERVAL = 8.0
MAX_GAP = 10.0
MIN_POINTS = 100
MIN_SOC_SPAN = 5.0
SOC_BACKTRACK_TOL = 0.5

# record field -> CSV column
DEFAULT_SCHEMA = {
    "vehicle_id": "vehicle_id",
    "timestamp": "timestamp",
    "current": "current_a",
    "pack_voltage": "pack_voltage_v",
    "soc": "soc_pct",
    "max_cell_voltage": "max_cell_v",
    "min_cell_voltage": "min_cell_v",
    "max_temp": "max_temp_c",
    "min_temp": "min_temp_c",
}
LOG_COLUMNS = tuple(DEFAULT_SCHEMA.values())
WEEKLY_COLUMNS = ("vehicle_id", "week", "capacity_ah", "n_segments")


class SchemaError(ValueError):
    """Input file does not carry the declared columns."""


class OrderingError(ValueError):
    """Records of one vehicle are not in timestamp order."""


class CapacityError(ValueError):
    """Coulomb counting is undefined for the segment."""


@dataclass(frozen=True, slots=True)
class ChargingRecord:
    vehicle_id: str
    timestamp: int
    current: float
    pack_voltage: float
    soc: float
    max_cell_voltage: float
    min_cell_voltage: float
    max_temp: float
    min_temp: float

    def check(self) -> None:
        vals = (self.current, self.pack_voltage, self.soc, self.max_cell_voltage,
                self.min_cell_voltage, self.max_temp, self.min_temp)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite value")
        if not 0.0 <= self.soc <= 100.0:
            raise ValueError(f"soc {self.soc} outside [0, 100]")
        if self.min_cell_voltage > self.max_cell_voltage:
            raise ValueError("min_cell_voltage > max_cell_voltage")
        if self.min_temp > self.max_temp:
            raise ValueError("min_temp > max_temp")


@dataclass
class ParseResult:
    records: list[ChargingRecord]
    skipped: int = 0
    row_errors: list[tuple[int, str]] = field(default_factory=list)


def _parse_timestamp(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"timestamp {text!r} is not integral") from None
        return int(value)


def parse_charging_log(path, schema: dict[str, str] | None = None) -> ParseResult:
    """Read a charging-log CSV. Bad rows are skipped and tallied, never dropped silently."""
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    missing_fields = set(DEFAULT_SCHEMA) - set(schema)
    if missing_fields:
        raise SchemaError(f"schema lacks fields {sorted(missing_fields)}")
    path = Path(path)
    result = ParseResult(records=[])
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in schema.values() if c not in header]
        if absent:
            raise SchemaError(f"{path}: missing required columns {absent}")
        for line, row in enumerate(reader, start=2):
            try:
                rec = ChargingRecord(
                    vehicle_id=row[schema["vehicle_id"]].strip(),
                    timestamp=_parse_timestamp(row[schema["timestamp"]]),
                    **{k: float(row[schema[k]]) for k in DEFAULT_SCHEMA if k not in ("vehicle_id", "timestamp")},
                )
                if not rec.vehicle_id:
                    raise ValueError("empty vehicle_id")
                rec.check()
            except (ValueError, TypeError, AttributeError) as exc:
                result.skipped += 1
                result.row_errors.append((line, str(exc)))
                continue
            result.records.append(rec)
    if result.skipped:
        log.warning("%s: skipped %d malformed rows", path, result.skipped)
    return result


def write_charging_log(path, records: Iterable[ChargingRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.vehicle_id, r.timestamp, repr(r.current), repr(r.pack_voltage), repr(r.soc),
                        repr(r.max_cell_voltage), repr(r.min_cell_voltage), repr(r.max_temp), repr(r.min_temp)])


@dataclass
class ChargingSegment:
    vehicle_id: str
    records: list[ChargingRecord]
    sample_interval: float = NOMINAL_INTERVAL

    @property
    def start_time(self) -> int:
        return self.records[0].timestamp

    @property
    def end_time(self) -> int:
        return self.records[-1].timestamp

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)


def split_sessions(records: Sequence[ChargingRecord], max_gap: float = MAX_GAP,
                   sample_interval: float = NOMINAL_INTERVAL) -> list[ChargingSegment]:
    """Cut the stream wherever the gap exceeds ``max_gap`` (strictly) or the vehicle changes."""
    segments: list[ChargingSegment] = []
    last_ts: dict[str, int] = {}
    current: list[ChargingRecord] = []
    for rec in records:
        prev = last_ts.get(rec.vehicle_id)
        if prev is not None and rec.timestamp < prev:
            raise OrderingError(f"vehicle {rec.vehicle_id}: timestamp {rec.timestamp} after {prev}")
        if current and (rec.vehicle_id != current[-1].vehicle_id or rec.timestamp - current[-1].timestamp > max_gap):
            segments.append(ChargingSegment(current[0].vehicle_id, current, sample_interval))
            current = []
        current.append(rec)
        last_ts[rec.vehicle_id] = rec.timestamp
    if current:
        segments.append(ChargingSegment(current[0].vehicle_id, current, sample_interval))
    return segments


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.valid


def validate_segment(seg: ChargingSegment, min_points: int = MIN_POINTS, min_span: float = MIN_SOC_SPAN,
                     backtrack_tol: float = SOC_BACKTRACK_TOL) -> Validity:
    if len(seg) <= min_points:
        return Validity(False, f"too short: {len(seg)} points (need > {min_points})")
    soc = seg.column("soc")
    backtrack = float(np.max(np.maximum.accumulate(soc) - soc))
    if backtrack > backtrack_tol:
        return Validity(False, f"soc not monotone: backtrack {backtrack:.3g} > {backtrack_tol}")
    span = soc[-1] - soc[0]
    if span < min_span:
        return Validity(False, f"soc span {span:.3g} below {min_span}")
    return Validity(True)


@dataclass(frozen=True)
class SegmentCapacityEstimate:
    vehicle_id: str
    week_index: int
    capacity: float
    soc_span: float
    valid: bool = True


def segment_charge_ah(seg: ChargingSegment) -> float:
    """Charge delivered, ``-sum(I_k dt_k)`` in Ah. Each sample holds until the next one;
    the last holds for the nominal interval."""
    t = seg.column("timestamp")
    current = seg.column("current")
    dt = np.append(np.diff(t), seg.sample_interval)
    return -math.fsum(current * dt) / 3600.0


def week_index(timestamp: float, epoch: float) -> int:
    return int(math.floor((timestamp - epoch) / SECONDS_PER_WEEK))


def estimate_segment_capacity(seg: ChargingSegment, epoch: float | None = None) -> SegmentCapacityEstimate:
    """Coulomb-counted capacity: charge divided by the SOC fraction gained."""
    span = (seg.records[-1].soc - seg.records[0].soc) / 100.0
    if span <= 0.0:
        raise CapacityError(f"soc span {span * 100:.3g} points; capacity undefined")
    capacity = segment_charge_ah(seg) / span
    week = week_index(seg.start_time, seg.start_time if epoch is None else epoch)
    return SegmentCapacityEstimate(seg.vehicle_id, week, capacity, span, valid=capacity > 0)


def vehicle_epochs(records: Iterable[ChargingRecord]) -> dict[str, int]:
    """Earliest timestamp per vehicle; anchors week indices."""
    out: dict[str, int] = {}
    for r in records:
        if r.vehicle_id not in out or r.timestamp < out[r.vehicle_id]:
            out[r.vehicle_id] = r.timestamp
    return out


@dataclass
class WeeklySeries:
    """Weeks ``0..max`` for one vehicle; ``capacity`` is NaN where no valid segment exists."""

    vehicle_id: str
    weeks: np.ndarray
    capacity: np.ndarray
    n_segments: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.capacity)


def aggregate_weekly(estimates: Iterable[SegmentCapacityEstimate]) -> dict[str, WeeklySeries]:
    """Mean of each week's valid estimates; empty weeks stay NaN."""
    buckets: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for e in estimates:
        if e.valid and e.week_index >= 0:
            buckets[e.vehicle_id][e.week_index].append(e.capacity)
        else:
            buckets[e.vehicle_id]  # vehicle stays listed even with no usable weeks
    out = {}
    for vid in sorted(buckets):
        weeks_map = buckets[vid]
        n = max(weeks_map) + 1 if weeks_map else 0
        cap = np.full(n, np.nan)
        cnt = np.zeros(n, dtype=np.int64)
        for w, vals in weeks_map.items():
            cap[w] = math.fsum(vals) / len(vals)  # fsum: exact, order independent
            cnt[w] = len(vals)
        out[vid] = WeeklySeries(vid, np.arange(n), cap, cnt)
    return out


def median_filter(series, window: int = 5) -> np.ndarray:
    """Centered running median with replicate padding; output length equals input length."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window!r}")
    if window > x.size:
        raise ValueError(f"window {window} longer than series ({x.size})")
    if np.isnan(x).any():
        raise ValueError("series contains NaN; smooth observed values only")
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(padded, window), axis=1)


def smooth_observed(capacity: np.ndarray, window: int = 5) -> np.ndarray:
    """Median-filter the observed weeks of a gappy series, leaving gaps as NaN.

    The window shrinks to the largest odd size that fits very short series.
    """
    capacity = np.asarray(capacity, dtype=np.float64)
    out = capacity.copy()
    obs = ~np.isnan(capacity)
    n = int(obs.sum())
    if n == 0:
        return out
    w = min(window, n if n % 2 else n - 1)
    out[obs] = median_filter(capacity[obs], w)
    return out


@dataclass
class IngestResult:
    parse: ParseResult
    segments: list[ChargingSegment]
    validity: list[Validity]
    estimates: list[SegmentCapacityEstimate]
    weekly: dict[str, WeeklySeries]
    epochs: dict[str, int]

    def rejection_counts(self) -> dict[str, int]:
        counts: dict[str, int] = defaultdict(int)
        for v in self.validity:
            counts["valid" if v.valid else v.reason.split(":")[0]] += 1
        return dict(counts)

    def valid_segments(self) -> list[ChargingSegment]:
        return [s for s, v in zip(self.segments, self.validity) if v.valid]


def ingest_records(parse: ParseResult, max_gap: float = MAX_GAP, min_points: int = MIN_POINTS,
                   min_span: float = MIN_SOC_SPAN, backtrack_tol: float = SOC_BACKTRACK_TOL) -> IngestResult:
    records = sorted(parse.records, key=lambda r: (r.vehicle_id, r.timestamp))
    epochs = vehicle_epochs(records)
    segments = split_sessions(records, max_gap=max_gap)
    validity = [validate_segment(s, min_points, min_span, backtrack_tol) for s in segments]
    estimates = [estimate_segment_capacity(s, epochs[s.vehicle_id]) for s, v in zip(segments, validity) if v]
    weekly = aggregate_weekly(estimates)
    for vid in epochs:
        weekly.setdefault(vid, WeeklySeries(vid, np.arange(0), np.zeros(0), np.zeros(0, dtype=np.int64)))
    return IngestResult(parse, segments, validity, estimates, dict(sorted(weekly.items())), epochs)


def ingest_log(path, schema: dict[str, str] | None = None) -> IngestResult:
    return ingest_records(parse_charging_log(path, schema))


def write_weekly_csv(path, weekly: dict[str, WeeklySeries]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(WEEKLY_COLUMNS)
        for vid, s in weekly.items():
            for week, cap, n in zip(s.weeks, s.capacity, s.n_segments):
                w.writerow([vid, int(week), "" if np.isnan(cap) else repr(float(cap)), int(n)])


def read_weekly_csv(path) -> dict[str, WeeklySeries]:
    rows: dict[str, list[tuple[int, float, int]]] = defaultdict(list)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        absent = [c for c in WEEKLY_COLUMNS if c not in (reader.fieldnames or [])]
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        for row in reader:
            cap = row["capacity_ah"].strip()
            rows[row["vehicle_id"]].append((int(row["week"]), float(cap) if cap else math.nan, int(row["n_segments"])))
    out = {}
    for vid in sorted(rows):
        items = sorted(rows[vid])
        n = items[-1][0] + 1
        cap = np.full(n, np.nan)
        cnt = np.zeros(n, dtype=np.int64)
        for week, c, k in items:
            cap[week], cnt[week] = c, k
        out[vid] = WeeklySeries(vid, np.arange(n), cap, cnt)
    return out
