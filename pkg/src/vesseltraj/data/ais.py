"""Reading DMA-style AIS CSV exports and cutting them into voyages."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("Timestamp", "MMSI", "Latitude", "Longitude", "Ship type")
TIMESTAMP_FORMATS = ("%d/%m/%Y %H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S")


@dataclass(frozen=True)
class AISRecord:
    timestamp: float  # seconds since the Unix epoch, UTC
    mmsi: str
    lat: float
    lon: float
    ship_type: str
    destination: str = ""


@dataclass
class ParseResult:
    records: list[AISRecord]
    n_rows: int = 0
    n_skipped: int = 0
    n_filtered: int = 0
    skipped_lines: list[int] = field(default_factory=list)


def parse_timestamp(text: str) -> float:
    text = text.strip()
    for fmt in TIMESTAMP_FORMATS:
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc).timestamp()
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp {text!r}")


def _column_map(header: list[str]) -> dict[str, int]:
    cols = {}
    for i, name in enumerate(header):
        key = name.strip().lstrip("#").strip()
        cols.setdefault(key, i)
    missing = [c for c in REQUIRED_COLUMNS if c not in cols]
    if missing:
        raise FormatError(f"AIS file is missing required column(s): {', '.join(missing)}")
    return cols


def parse_ais_csv(path: Path | str, ship_type: str | None = "Tanker") -> ParseResult:
    """Read and validate AIS rows; malformed rows are counted and skipped.

    ``ship_type`` filters case-insensitively on the "Ship type" column;
    ``None`` keeps every vessel type.
    """
    want = ship_type.strip().lower() if ship_type else None
    result = ParseResult([])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, no header row") from None
        cols = _column_map(header)
        i_ts, i_mmsi = cols["Timestamp"], cols["MMSI"]
        i_lat, i_lon, i_type = cols["Latitude"], cols["Longitude"], cols["Ship type"]
        i_dest = cols.get("Destination")
        for row in reader:
            if not row:
                continue
            result.n_rows += 1
            try:
                ts = parse_timestamp(row[i_ts])
                mmsi = row[i_mmsi].strip()
                lat = float(row[i_lat])
                lon = float(row[i_lon])
                kind = row[i_type].strip()
                dest = row[i_dest].strip() if i_dest is not None and i_dest < len(row) else ""
                if not mmsi or not (abs(lat) <= 90.0 and abs(lon) <= 180.0):
                    raise ValueError("position out of range")
            except (ValueError, IndexError):
                result.n_skipped += 1
                result.skipped_lines.append(reader.line_num)
                continue
            if want is not None and kind.lower() != want:
                result.n_filtered += 1
                continue
            result.records.append(AISRecord(ts, mmsi, lat, lon, kind, dest))
    if result.n_skipped:
        logger.info("%s: skipped %d malformed row(s)", path, result.n_skipped)
    return result


def group_by_vessel(records: Iterable[AISRecord]) -> dict[str, list[AISRecord]]:
    """Records per MMSI, sorted by time, duplicate timestamps dropped. Keys sorted."""
    groups: dict[str, list[AISRecord]] = defaultdict(list)
    for r in records:
        groups[r.mmsi].append(r)
    out = {}
    for mmsi in sorted(groups):
        recs = sorted(groups[mmsi], key=lambda r: r.timestamp)
        dedup = [recs[0]]
        for r in recs[1:]:
            if r.timestamp > dedup[-1].timestamp:
                dedup.append(r)
        out[mmsi] = dedup
    return out


def segment_voyages(records: list[AISRecord], gap_seconds: float = 3600.0) -> list[list[AISRecord]]:
    """Split one vessel's time-sorted records wherever the reporting gap exceeds the threshold."""
    if not records:
        return []
    times = np.array([r.timestamp for r in records])
    cuts = np.nonzero(np.diff(times) > gap_seconds)[0] + 1
    bounds = [0, *cuts.tolist(), len(records)]
    return [records[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
