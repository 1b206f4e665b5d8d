"""Event-log ingestion, export, and time rebinning.

Event CSV format (UTF-8, header required):

    timestamp,region_id,category,value

with ISO-8601 timestamps, region ids resolvable against the run's graph
(integer index, or label when the graph carries labels), categories from the
run's category list, and strictly positive decimal values. Slot binning is
half-open: an event at exactly a slot boundary belongs to the later slot.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .features import AnomalyTensor
from .graph import RegionGraph

logger = logging.getLogger(__name__)

__all__ = [
    "EventRecord",
    "IngestReport",
    "read_events_csv",
    "write_events_csv",
    "ingest",
    "ingest_csv",
    "export_events",
    "rebin",
]

CSV_HEADER = ["timestamp", "region_id", "category", "value"]
MAX_BAD_FRACTION = 0.01


@dataclass(frozen=True)
class EventRecord:
    """One raw report: when, where, what kind, how severe."""

    timestamp: datetime
    region_id: str
    category: str
    value: float
    line: int = 0  # source line for error reporting; 0 when synthetic


@dataclass
class IngestReport:
    n_events: int = 0  # records accumulated into the tensor
    n_dropped: int = 0  # records outside the requested time range
    errors: list[tuple[int, str]] = None  # (line, message) per bad record

    def __post_init__(self):
        if self.errors is None:
            self.errors = []


def read_events_csv(path) -> list[EventRecord]:
    """Parse an event CSV; malformed timestamps/values become per-record errors later.

    Only structural problems (missing header/columns) abort here; field
    validation happens in :func:`ingest` so bad records can be counted
    against the 1% tolerance with line numbers.
    """
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty event file (header required)") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)!r}; got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            ts_raw, region, category, value_raw = (cell.strip() for cell in row)
            try:
                ts = datetime.fromisoformat(ts_raw)
            except ValueError:
                ts = datetime.min
                value_raw = "nan"  # NaN value flags the record as bad at ingest
            try:
                value = float(value_raw)
            except ValueError:
                value = float("nan")
            records.append(
                EventRecord(timestamp=ts, region_id=region, category=category, value=value, line=lineno)
            )
    return records


def write_events_csv(path, records: Iterable[EventRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.timestamp.isoformat(), r.region_id, r.category, _fmt_value(r.value)])


def _fmt_value(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _resolve_region(g: RegionGraph, region_id: str) -> int | None:
    if g.region_labels is not None and region_id in g.region_labels:
        return g.region_labels.index(region_id)
    try:
        idx = int(region_id)
    except ValueError:
        return None
    return idx if 0 <= idx < g.n_regions else None


def ingest(
    events: Iterable[EventRecord],
    g: RegionGraph,
    categories: Sequence[str],
    t0: datetime,
    slot_duration: timedelta,
    n_slots: int,
) -> tuple[AnomalyTensor, IngestReport]:
    """Accumulate event values into an (N, n_slots, C) tensor.

    Events outside [t0, t0 + n_slots * slot_duration) are dropped and
    counted; unknown regions/categories and non-positive or non-finite
    values are per-record errors. More than 1% bad records aborts.
    """
    if slot_duration <= timedelta(0):
        raise DataError("slot_duration must be positive")
    if n_slots < 1:
        raise DataError(f"n_slots must be >= 1; got {n_slots}")
    cat_index = {name: i for i, name in enumerate(categories)}
    values = np.zeros((g.n_regions, n_slots, len(categories)), dtype=np.float64)
    report = IngestReport()
    n_records = 0
    slot_seconds = slot_duration.total_seconds()

    for rec in events:
        n_records += 1
        if not np.isfinite(rec.value):
            report.errors.append((rec.line, "unparseable timestamp or value"))
            continue
        region = _resolve_region(g, rec.region_id)
        if region is None:
            report.errors.append((rec.line, f"unknown region {rec.region_id!r}"))
            continue
        cat = cat_index.get(rec.category)
        if cat is None:
            report.errors.append((rec.line, f"unknown category {rec.category!r}"))
            continue
        if rec.value <= 0:
            report.errors.append((rec.line, f"non-positive value {rec.value}"))
            continue
        offset = (rec.timestamp - t0).total_seconds()
        slot = int(np.floor(offset / slot_seconds))
        if slot < 0 or slot >= n_slots:
            report.n_dropped += 1
            continue
        values[region, slot, cat] += rec.value
        report.n_events += 1

    if n_records > 0 and len(report.errors) > MAX_BAD_FRACTION * n_records:
        sample = "; ".join(f"line {ln}: {msg}" for ln, msg in report.errors[:5])
        raise DataError(
            f"{len(report.errors)} of {n_records} records failed "
            f"(> {MAX_BAD_FRACTION:.0%} tolerance): {sample}"
        )
    for line, msg in report.errors:
        logger.warning("skipped record at line %d: %s", line, msg)
    if report.n_dropped:
        logger.info("dropped %d events outside the requested time range", report.n_dropped)

    tensor = AnomalyTensor(
        values=values,
        slot_duration=slot_duration,
        category_names=tuple(categories),
        t0=t0,
    )
    return tensor, report


def ingest_csv(
    path,
    g: RegionGraph,
    categories: Sequence[str],
    t0: datetime,
    slot_duration: timedelta,
    n_slots: int,
) -> tuple[AnomalyTensor, IngestReport]:
    return ingest(read_events_csv(path), g, categories, t0, slot_duration, n_slots)


def export_events(x: AnomalyTensor, per_unit: bool = True) -> list[EventRecord]:
    """Turn a tensor back into event records (inverse of :func:`ingest`).

    With ``per_unit`` (integer tensors only), each unit of count becomes one
    value-1 event; otherwise one event per nonzero cell carries the cell
    value. Timestamps sit at the slot start, so re-ingesting with the same
    t0/slot_duration reproduces the tensor exactly.
    """
    if per_unit and not np.all(x.values == np.floor(x.values)):
        raise DataError("per-unit export requires integer-valued indices")
    records = []
    for r in range(x.n_regions):
        for t in range(x.n_slots):
            ts = x.t0 + t * x.slot_duration
            for c in range(x.n_categories):
                v = x.values[r, t, c]
                if v == 0:
                    continue
                if per_unit:
                    records.extend(
                        EventRecord(ts, str(r), x.category_names[c], 1.0)
                        for _ in range(int(v))
                    )
                else:
                    records.append(EventRecord(ts, str(r), x.category_names[c], float(v)))
    return records


def rebin(x: AnomalyTensor, factor: int) -> AnomalyTensor:
    """Sum each run of ``factor`` consecutive slots (coarser time intervals).

    A trailing partial run is dropped and logged. Zero ratio is
    non-increasing under rebinning since values are nonnegative.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"rebin factor must be an integer >= 1; got {factor!r}")
    if factor == 1:
        return x
    t_new = x.n_slots // factor
    dropped = x.n_slots - t_new * factor
    if t_new < 1:
        raise DataError(f"rebin factor {factor} exceeds slot count {x.n_slots}")
    if dropped:
        logger.info("rebin dropped %d trailing slots (factor %d)", dropped, factor)
    trimmed = x.values[:, : t_new * factor, :]
    summed = trimmed.reshape(x.n_regions, t_new, factor, x.n_categories).sum(axis=2)
    return AnomalyTensor(
        values=summed,
        slot_duration=x.slot_duration * factor,
        category_names=x.category_names,
        t0=x.t0,
    )
