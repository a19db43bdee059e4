"""Place/trip CSV loading, endpoint snapping and the snapped-trip cache."""

from __future__ import annotations

import csv
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from placemove.geo import GeoPoint, GridIndex

PLACES_HEADER = ["external_id", "lat", "lon", "category"]
TRIPS_HEADER = ["pickup_datetime", "dropoff_datetime", "pickup_lon", "pickup_lat",
                "dropoff_lon", "dropoff_lat"]

CACHE_MAGIC = b"PLMVTRIP"
CACHE_VERSION = 1
CACHE_RECORD = np.dtype([("origin", "<u4"), ("dest", "<u4"), ("depart", "<i8"), ("arrive", "<i8")])

DEFAULT_SNAP_RADIUS_M = 200.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Place:
    id: int
    external_id: str
    location: GeoPoint
    category: int


@dataclass(frozen=True)
class RawTripRecord:
    pickup: Optional[GeoPoint]
    dropoff: Optional[GeoPoint]
    pickup_time: float
    dropoff_time: float


class Trip(NamedTuple):
    origin: int
    dest: int
    depart: int
    arrive: int


class TripTable:
    """Column store of snapped trips; iterates and indexes as ``Trip`` tuples."""

    def __init__(self, origin, dest, depart, arrive):
        self.origin = np.asarray(origin, dtype=np.int64)
        self.dest = np.asarray(dest, dtype=np.int64)
        self.depart = np.asarray(depart, dtype=np.int64)
        self.arrive = np.asarray(arrive, dtype=np.int64)
        n = len(self.origin)
        if not (len(self.dest) == len(self.depart) == len(self.arrive) == n):
            raise ValueError("trip columns differ in length")

    @classmethod
    def from_trips(cls, trips: Iterable[Sequence[int]]) -> "TripTable":
        rows = list(trips)
        if not rows:
            return cls([], [], [], [])
        o, d, t0, t1 = zip(*rows)
        return cls(o, d, t0, t1)

    def __len__(self) -> int:
        return len(self.origin)

    def __getitem__(self, i) -> Trip:
        return Trip(int(self.origin[i]), int(self.dest[i]), int(self.depart[i]), int(self.arrive[i]))

    def __iter__(self) -> Iterator[Trip]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripTable):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c))
                   for c in ("origin", "dest", "depart", "arrive"))


@dataclass
class DropStats:
    total: int = 0
    retained: int = 0
    dropped: Counter = field(default_factory=Counter)

    @property
    def retention(self) -> float:
        return self.retained / self.total if self.total else 0.0

    def as_dict(self) -> dict:
        return {"total": self.total, "retained": self.retained,
                "dropped": dict(sorted(self.dropped.items())), "retention": self.retention}


# -- places -------------------------------------------------------------------

def load_places(path) -> tuple[list[Place], list[str]]:
    """Read a places CSV and re-index rows densely from 0.

    Category labels are mapped to small integers in order of first
    appearance; the returned table maps id -> label.
    """
    path = Path(path)
    places: list[Place] = []
    categories: list[str] = []
    cat_ids: dict[str, int] = {}
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PLACES_HEADER:
            raise DataError(f"{path}: line 1: expected header {','.join(PLACES_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            ext, lat, lon, cat = (x.strip() for x in row)
            if not ext or not cat:
                raise DataError(f"{path}: line {lineno}: empty external_id or category")
            try:
                loc = GeoPoint(float(lat), float(lon))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if ext in seen:
                raise DataError(f"{path}: line {lineno}: duplicate external_id {ext!r} "
                                f"(first seen on line {seen[ext]})")
            seen[ext] = lineno
            if cat not in cat_ids:
                cat_ids[cat] = len(categories)
                categories.append(cat)
            places.append(Place(len(places), ext, loc, cat_ids[cat]))
    return places, categories


def write_places(path, places: Sequence[Place], categories: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLACES_HEADER)
        for p in places:
            w.writerow([p.external_id, repr(p.location.lat), repr(p.location.lon),
                        categories[p.category]])


def build_index(places: Sequence[Place], cell_size: float = DEFAULT_SNAP_RADIUS_M) -> GridIndex:
    return GridIndex([p.id for p in places], [p.location.lat for p in places],
                     [p.location.lon for p in places], cell_size=cell_size)


def place_categories(places: Sequence[Place]) -> np.ndarray:
    return np.array([p.category for p in places], dtype=np.int64)


# -- trips --------------------------------------------------------------------

def _to_epoch(col: pd.Series, kind: str, tz: str) -> np.ndarray:
    """Parse one datetime column to float epoch seconds; unparseable -> NaN."""
    if kind == "epoch":
        return pd.to_numeric(col, errors="coerce").to_numpy(dtype=np.float64)
    ts = pd.to_datetime(col, errors="coerce", format="ISO8601")
    if ts.dt.tz is None:
        ts = ts.dt.tz_localize(tz, ambiguous="NaT", nonexistent="NaT")
    out = np.full(len(ts), np.nan)
    ok = ts.notna().to_numpy()
    out[ok] = ts[ok].dt.tz_convert("UTC").astype("int64").to_numpy() / 1e9
    return out


def _detect_time_kind(col: pd.Series) -> str:
    vals = col.dropna()
    vals = vals[vals.astype(str).str.strip() != ""]
    if len(vals) and vals.astype(str).str.fullmatch(r"\s*-?\d+\s*").all():
        return "epoch"
    return "iso"


def _point(lat: float, lon: float) -> Optional[GeoPoint]:
    if math.isnan(lat) or math.isnan(lon):
        return None
    try:
        return GeoPoint(lat, lon)
    except ValueError:
        return None


def iter_raw_trips(path, tz: str = "UTC", chunksize: int = 100_000) -> Iterator[RawTripRecord]:
    """Stream trip records from a trips CSV.

    Empty or invalid coordinates become ``None``; unparseable timestamps become
    NaN and are dropped during snapping. The timestamp encoding (ISO-8601 or
    integer epoch seconds) is detected per column on the first chunk and then
    held fixed for the file.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().rstrip("\r\n").split(",")]
    if header != TRIPS_HEADER:
        raise DataError(f"{path}: line 1: expected header {','.join(TRIPS_HEADER)}")
    kinds = None
    reader = pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=chunksize)
    for chunk in reader:
        chunk = chunk.replace("", np.nan)
        if kinds is None:
            kinds = {c: _detect_time_kind(chunk[c]) for c in TRIPS_HEADER[:2]}
        t0 = _to_epoch(chunk["pickup_datetime"], kinds["pickup_datetime"], tz)
        t1 = _to_epoch(chunk["dropoff_datetime"], kinds["dropoff_datetime"], tz)
        coords = {c: pd.to_numeric(chunk[c], errors="coerce").to_numpy(dtype=np.float64)
                  for c in TRIPS_HEADER[2:]}
        for i in range(len(chunk)):
            yield RawTripRecord(
                _point(coords["pickup_lat"][i], coords["pickup_lon"][i]),
                _point(coords["dropoff_lat"][i], coords["dropoff_lon"][i]),
                float(t0[i]), float(t1[i]))


def snap_trips(raw: Iterable[RawTripRecord], index: GridIndex, n_places: int,
               radius: float = DEFAULT_SNAP_RADIUS_M) -> tuple[TripTable, np.ndarray, DropStats]:
    """Snap both endpoints of every record to the nearest place within ``radius``.

    Returns the retained trips in input order, per-place drop-off counts and
    the drop statistics. Nothing here raises on dirty rows; they are counted.
    """
    stats = DropStats()
    counts = np.zeros(n_places, dtype=np.int64)
    cols: tuple[list, list, list, list] = ([], [], [], [])
    for rec in raw:
        stats.total += 1
        if rec.pickup is None or rec.dropoff is None:
            stats.dropped["missing_coords"] += 1
            continue
        if not (math.isfinite(rec.pickup_time) and math.isfinite(rec.dropoff_time)):
            stats.dropped["missing_time"] += 1
            continue
        o = index.nearest_within(rec.pickup, radius)
        if o is None:
            stats.dropped["origin_unmatched"] += 1
            continue
        d = index.nearest_within(rec.dropoff, radius)
        if d is None:
            stats.dropped["dest_unmatched"] += 1
            continue
        stats.retained += 1
        counts[d[0]] += 1
        cols[0].append(o[0])
        cols[1].append(d[0])
        cols[2].append(int(round(rec.pickup_time)))
        cols[3].append(int(round(rec.dropoff_time)))
    return TripTable(*cols), counts, stats


def checkin_counts(trips: TripTable, n_places: int) -> np.ndarray:
    return np.bincount(trips.dest, minlength=n_places).astype(np.int64)


# -- snapped-trip cache ---------------------------------------------------------

def write_trip_cache(path, trips: TripTable) -> None:
    rec = np.empty(len(trips), dtype=CACHE_RECORD)
    rec["origin"] = trips.origin
    rec["dest"] = trips.dest
    rec["depart"] = trips.depart
    rec["arrive"] = trips.arrive
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, 0))
        fh.write(rec.tobytes())


def read_trip_cache(path) -> TripTable:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:8] != CACHE_MAGIC:
            raise DataError(f"{path}: not a snapped-trip cache")
        version, _ = struct.unpack("<II", head[8:])
        if version != CACHE_VERSION:
            raise DataError(f"{path}: unsupported cache version {version}")
        body = fh.read()
    if len(body) % CACHE_RECORD.itemsize:
        raise DataError(f"{path}: truncated cache")
    rec = np.frombuffer(body, dtype=CACHE_RECORD)
    return TripTable(rec["origin"], rec["dest"], rec["depart"], rec["arrive"])
