"""Great-circle distances and a uniform-grid index for radius queries."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
METERS_PER_DEG_LAT = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    return _haversine(a.lat, a.lon, b.lat, b.lon)


def _haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    p1 = math.radians(lat1)
    p2 = math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_array(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorised haversine in meters; arguments broadcast like numpy arrays."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


class GridIndex:
    """Immutable bucket grid over a fixed set of places.

    Cells are ``cell_size`` meters on a side, converted to degrees at the mean
    latitude of the indexed points. Queries widen the searched ring of cells to
    cover the radius at the query's own latitude, so results are exact for any
    radius, not just ``radius <= cell_size``.
    """

    def __init__(self, ids: Sequence[int], lats: Sequence[float], lons: Sequence[float],
                 cell_size: float = 200.0):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.ids = np.asarray(ids, dtype=np.int64)
        self.lats = np.asarray(lats, dtype=np.float64)
        self.lons = np.asarray(lons, dtype=np.float64)
        if not (len(self.ids) == len(self.lats) == len(self.lons)):
            raise ValueError("ids, lats and lons differ in length")
        self.cell_size = float(cell_size)

        mean_lat = float(self.lats.mean()) if len(self.lats) else 0.0
        self.cell_lat_deg = self.cell_size / METERS_PER_DEG_LAT
        cos_mean = max(math.cos(math.radians(mean_lat)), 1e-6)
        self.cell_lon_deg = self.cell_size / (METERS_PER_DEG_LAT * cos_mean)

        buckets: dict[tuple[int, int], list[int]] = defaultdict(list)
        for row, (lat, lon) in enumerate(zip(self.lats, self.lons)):
            buckets[self._cell(lat, lon)].append(row)
        self.buckets = {key: tuple(rows) for key, rows in buckets.items()}
        if len(self.lats):
            self.bounds = (float(self.lats.min()), float(self.lons.min()),
                           float(self.lats.max()), float(self.lons.max()))
        else:
            self.bounds = None

    @classmethod
    def from_points(cls, points: Iterable[tuple[int, GeoPoint]], cell_size: float = 200.0):
        ids, lats, lons = [], [], []
        for pid, pt in points:
            ids.append(pid)
            lats.append(pt.lat)
            lons.append(pt.lon)
        return cls(ids, lats, lons, cell_size=cell_size)

    def __len__(self) -> int:
        return len(self.ids)

    def _cell(self, lat: float, lon: float) -> tuple[int, int]:
        return (math.floor(lat / self.cell_lat_deg), math.floor(lon / self.cell_lon_deg))

    def _rings(self, lat: float, radius: float) -> tuple[int, int]:
        ang = radius / EARTH_RADIUS_M
        ring_lat = math.ceil((ang * 180.0 / math.pi) / self.cell_lat_deg)
        # widest longitude span reachable within the radius from this latitude
        s = math.sin(min(ang, math.pi / 2)) / max(math.cos(math.radians(lat)), 1e-12)
        if s >= 1.0:
            return ring_lat, -1
        dlon = math.degrees(math.asin(s))
        return ring_lat, math.ceil(dlon / self.cell_lon_deg)

    def candidates(self, lat: float, lon: float, radius: float) -> list[int]:
        """Row numbers of every indexed point that could lie within ``radius``."""
        ring_lat, ring_lon = self._rings(lat, radius)
        if ring_lon < 0 or (2 * ring_lat + 1) * (2 * ring_lon + 1) > 4 * len(self.buckets):
            return [row for rows in self.buckets.values() for row in rows]
        cy, cx = self._cell(lat, lon)
        out: list[int] = []
        for dy in range(-ring_lat, ring_lat + 1):
            for dx in range(-ring_lon, ring_lon + 1):
                rows = self.buckets.get((cy + dy, cx + dx))
                if rows:
                    out.extend(rows)
        return out

    def nearest_within(self, q: GeoPoint, radius: float) -> Optional[tuple[int, float]]:
        return self.nearest_within_latlon(q.lat, q.lon, radius)

    def nearest_within_latlon(self, lat: float, lon: float, radius: float):
        if radius <= 0:
            raise ValueError("radius must be positive")
        best = None
        for row in self.candidates(lat, lon, radius):
            d = _haversine(lat, lon, self.lats[row], self.lons[row])
            if d > radius:
                continue
            key = (d, int(self.ids[row]))
            if best is None or key < best:
                best = key
        if best is None:
            return None
        return best[1], best[0]


def nearest_within(index: GridIndex, q: GeoPoint, radius: float) -> Optional[tuple[int, float]]:
    """Nearest indexed place within ``radius`` meters as ``(place_id, meters)``.

    Equal distances resolve to the smallest place id. Returns None when nothing
    lies within the radius (including on an empty index).
    """
    return index.nearest_within(q, radius)
