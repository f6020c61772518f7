"""Parsing of raw LBS point records and panel construction filters.

The raw format is a header-bearing CSV with columns
``device ID, latitude, longitude, timestamp, dwelltime`` where dwelltime
is in minutes. Panel construction keeps devices with enough distinct
days and nights of in-window, in-region data.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, TextIO, Union

from .errors import ConfigurationError, FormatError, OutOfRegionError
from .geo import AreaMap, area_of_point

log = logging.getLogger(__name__)

LBS_COLUMNS = ("device ID", "latitude", "longitude", "timestamp", "dwelltime")

# night = the 20:00-09:00 span, labeled by its starting date
NIGHT_START_HOUR = 20
NIGHT_END_HOUR = 9


@dataclass(frozen=True)
class LbsRecord:
    device_id: str
    lat: float
    lon: float
    timestamp: datetime
    dwell_minutes: float


@dataclass
class Panel:
    """Filtered study panel: per-device record lists sorted by timestamp."""

    window_start: datetime
    n_hours: int
    devices: dict[str, list[LbsRecord]]
    meta: dict = field(default_factory=dict)

    @property
    def window_end(self) -> datetime:
        return self.window_start + timedelta(hours=self.n_hours)

    @property
    def n_devices(self) -> int:
        return len(self.devices)


def parse_timestamp(text: str) -> datetime:
    """Parse ``YYYY-MM-DD-HH:MM:SS`` (single-digit fields tolerated) or ISO-8601."""
    text = text.strip()
    parts = text.split("-")
    if len(parts) == 4 and ":" in parts[3]:
        try:
            y, mo, d = int(parts[0]), int(parts[1]), int(parts[2])
            hh, mm, ss = (int(x) for x in parts[3].split(":"))
            return datetime(y, mo, d, hh, mm, ss)
        except ValueError:
            raise FormatError(f"bad timestamp {text!r}") from None
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise FormatError(f"bad timestamp {text!r}") from None


def _normalize_header(name: str) -> str:
    return "".join(name.strip().lower().split())


def parse_lbs_csv(source: Union[str, Path, TextIO]) -> tuple[list[LbsRecord], int]:
    """Parse an LBS CSV into records.

    Returns (records, n_skipped) where n_skipped counts rows dropped for
    unparseable or out-of-range fields. A file without the expected
    header raises FormatError; a zero-byte file yields ([], 0).
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", newline="") as fh:
            return parse_lbs_csv(fh)

    reader = csv.reader(source, skipinitialspace=True)
    try:
        header = next(reader)
    except StopIteration:
        return [], 0
    wanted = {_normalize_header(c): i for i, c in enumerate(header)}
    expected = [_normalize_header(c) for c in LBS_COLUMNS]
    if not all(c in wanted for c in expected):
        raise FormatError(f"missing LBS header, got {header!r}")
    cols = [wanted[c] for c in expected]

    records: list[LbsRecord] = []
    skipped = 0
    for row in reader:
        if not row:
            continue
        try:
            device = row[cols[0]].strip()
            lat = float(row[cols[1]])
            lon = float(row[cols[2]])
            ts = parse_timestamp(row[cols[3]])
            dwell = float(row[cols[4]])
        except (IndexError, ValueError, FormatError):
            skipped += 1
            continue
        if not device or dwell < 0 or not (-90 <= lat <= 90) or not (-180 <= lon <= 180):
            skipped += 1
            continue
        records.append(LbsRecord(device, lat, lon, ts, dwell))
    if skipped:
        log.warning("parse_lbs_csv: skipped %d malformed rows", skipped)
    return records, skipped


def write_lbs_csv(records: Iterable[LbsRecord], dest: Union[str, Path, TextIO]) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="") as fh:
            write_lbs_csv(records, fh)
            return
    writer = csv.writer(dest)
    writer.writerow(LBS_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.device_id,
                f"{r.lat:.6f}",
                f"{r.lon:.6f}",
                r.timestamp.strftime("%Y-%m-%d-%H:%M:%S"),
                f"{r.dwell_minutes:.4f}",
            ]
        )


def night_label(ts: datetime):
    """Date labeling the 20:00-09:00 night span containing ts, or None."""
    if ts.hour >= NIGHT_START_HOUR:
        return ts.date()
    if ts.hour < NIGHT_END_HOUR:
        return (ts - timedelta(days=1)).date()
    return None


def build_panel(
    records: Iterable[LbsRecord],
    window_start: datetime,
    n_hours: int,
    amap: AreaMap,
    max_dwell_hours: float = 24.0,
    min_unique_days: int = 3,
    min_unique_nights: int = 3,
) -> Panel:
    """Apply window/region/dwell filters and the days/nights panel rule.

    Records outside the window or region, or with dwell above the cap,
    are dropped. A device survives iff its remaining records cover at
    least ``min_unique_days`` distinct calendar dates and
    ``min_unique_nights`` distinct nights. Dwell spans crossing the
    window end are clipped to the window.
    """
    if window_start.minute or window_start.second or window_start.microsecond:
        raise ConfigurationError("window start must be hour-aligned")
    if n_hours < 1:
        raise ConfigurationError("window must cover at least one hour")
    window_end = window_start + timedelta(hours=n_hours)

    dropped = {"window": 0, "region": 0, "dwell": 0}
    by_device: dict[str, list[LbsRecord]] = {}
    for rec in records:
        if not (window_start <= rec.timestamp < window_end):
            dropped["window"] += 1
            continue
        if rec.dwell_minutes > max_dwell_hours * 60.0:
            dropped["dwell"] += 1
            continue
        try:
            area_of_point(rec.lat, rec.lon, amap)
        except OutOfRegionError:
            dropped["region"] += 1
            continue
        end = rec.timestamp + timedelta(minutes=rec.dwell_minutes)
        if end > window_end:
            rec = replace(rec, dwell_minutes=(window_end - rec.timestamp).total_seconds() / 60.0)
        by_device.setdefault(rec.device_id, []).append(rec)

    kept: dict[str, list[LbsRecord]] = {}
    for device in sorted(by_device):
        recs = sorted(by_device[device], key=lambda r: (r.timestamp, r.dwell_minutes))
        days = {r.timestamp.date() for r in recs}
        nights = {n for r in recs if (n := night_label(r.timestamp)) is not None}
        if len(days) >= min_unique_days and len(nights) >= min_unique_nights:
            kept[device] = recs

    meta = {
        "window_start": window_start.isoformat(),
        "n_hours": n_hours,
        "max_dwell_hours": max_dwell_hours,
        "min_unique_days": min_unique_days,
        "min_unique_nights": min_unique_nights,
        "n_devices": len(kept),
        "n_devices_seen": len(by_device),
        "dropped_records": dropped,
    }
    return Panel(window_start, n_hours, kept, meta)


def save_panel(panel: Panel, csv_path: Union[str, Path], meta_path: Union[str, Path]) -> None:
    """Persist a panel as a filtered-record CSV plus a JSON sidecar."""
    buf = io.StringIO()
    write_lbs_csv((r for recs in panel.devices.values() for r in recs), buf)
    Path(csv_path).write_text(buf.getvalue())
    Path(meta_path).write_text(json.dumps(panel.meta, indent=2, sort_keys=True))


def load_panel(csv_path: Union[str, Path], meta_path: Union[str, Path]) -> Panel:
    meta = json.loads(Path(meta_path).read_text())
    records, _ = parse_lbs_csv(csv_path)
    devices: dict[str, list[LbsRecord]] = {}
    for rec in records:
        devices.setdefault(rec.device_id, []).append(rec)
    devices = {d: sorted(rs, key=lambda r: (r.timestamp, r.dwell_minutes)) for d, rs in sorted(devices.items())}
    return Panel(datetime.fromisoformat(meta["window_start"]), meta["n_hours"], devices, meta)
