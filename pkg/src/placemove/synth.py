"""Synthetic city: labeled places and timestamped trips with known structure.

Places are scattered uniformly over a bounding box and given Zipf popularity.
A trip picks its origin by popularity, a destination category from the
origin category's row of the flow matrix, a destination by popularity within
that category, and a departure hour from the (origin, destination) category
pair's Gaussian mixture. Arrival adds a distance-proportional travel time
with lognormal noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from placemove.geo import haversine_array
from placemove.ingest import PLACES_HEADER, TRIPS_HEADER

# (weight, mean hour, sd hours)
Profile = list[tuple[float, float, float]]

CITY5_CATEGORIES = ["residential", "retail", "food", "office", "recreation"]

# Rows: origin category, columns: destination category (order as above).
# residential/food and retail/office send trips to similar destination mixes;
# they differ in *when* they travel.
CITY5_FLOW = [
    [0.05, 0.20, 0.15, 0.45, 0.15],
    [0.40, 0.05, 0.20, 0.20, 0.15],
    [0.10, 0.15, 0.10, 0.45, 0.20],
    [0.40, 0.10, 0.20, 0.15, 0.15],
    [0.55, 0.10, 0.20, 0.05, 0.10],
]

# Departure peaks by origin category: morning commute out of residential,
# late-morning shopping, after-lunch food, evening commute out of offices,
# late-night return from recreation.
CITY5_PEAKS = [8.0, 11.0, 14.0, 17.5, 21.0]


def city5_profiles(sd: float = 0.4, background: float = 0.4) -> dict:
    """Per (origin, destination) category departure-hour mixtures.

    Each pair has one sharp peak at its origin category's hour (shifted a
    little by destination) plus a broad all-day component carrying
    ``background`` of the mass.
    """
    profiles = {}
    for i, peak in enumerate(CITY5_PEAKS):
        for j in range(len(CITY5_CATEGORIES)):
            comps = [(1.0 - background, peak + 0.1 * (j - 2), sd)]
            if background > 0:
                comps.append((background, 12.0, 8.0))
            profiles[f"{i},{j}"] = comps
    return profiles


@dataclass
class SynthConfig:
    n_places: int = 200
    n_trips: int = 50_000
    category_names: list = field(default_factory=lambda: list(CITY5_CATEGORIES))
    flow_matrix: list = field(default_factory=lambda: [row[:] for row in CITY5_FLOW])
    time_profiles: dict = field(default_factory=city5_profiles)
    zipf_s: float = 1.2
    bbox: tuple = (40.70, -74.02, 40.80, -73.92)  # lat_min, lon_min, lat_max, lon_max
    n_days: int = 300
    start: str = "2015-01-05T00:00:00"
    speed_mps: float = 10.0
    duration_noise_sigma: float = 0.3
    seed: int = 42

    @property
    def n_categories(self) -> int:
        return len(self.category_names)

    def validate(self) -> None:
        k = self.n_categories
        if k < 2:
            raise ValueError("need at least two categories")
        flow = np.asarray(self.flow_matrix, dtype=np.float64)
        if flow.shape != (k, k):
            raise ValueError(f"flow_matrix must be {k}x{k}")
        if (flow < 0).any() or not np.allclose(flow.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("flow_matrix rows must be non-negative and sum to 1")
        if not self.zipf_s > 0:
            raise ValueError("zipf_s must be positive")
        if self.n_places < k:
            raise ValueError(f"{self.n_places} places cannot cover {k} categories")
        if self.n_trips < 0 or self.n_days < 1:
            raise ValueError("n_trips must be >= 0 and n_days >= 1")
        for i in range(k):
            for j in range(k):
                if flow[i, j] > 0 and not self.time_profiles.get(f"{i},{j}"):
                    raise ValueError(f"missing time profile for categories {i},{j}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "bbox" in d:
            d["bbox"] = tuple(d["bbox"])
        if "time_profiles" in d:
            d["time_profiles"] = {k: [tuple(c) for c in v] for k, v in d["time_profiles"].items()}
        return cls(**d)


@dataclass
class SynthCity:
    lats: np.ndarray
    lons: np.ndarray
    categories: np.ndarray
    popularity: np.ndarray
    origin: np.ndarray
    dest: np.ndarray
    depart: np.ndarray  # epoch seconds
    arrive: np.ndarray


def _sample_hours(rng, profile: Profile, n: int) -> np.ndarray:
    w = np.array([c[0] for c in profile], dtype=np.float64)
    comp = rng.choice(len(profile), size=n, p=w / w.sum())
    mu = np.array([c[1] for c in profile])[comp]
    sd = np.array([c[2] for c in profile])[comp]
    return np.mod(rng.normal(mu, sd), 24.0)


def simulate(cfg: SynthConfig) -> SynthCity:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k, n = cfg.n_categories, cfg.n_places
    lat0, lon0, lat1, lon1 = cfg.bbox
    lats = rng.uniform(lat0, lat1, n)
    lons = rng.uniform(lon0, lon1, n)
    categories = rng.permutation(np.arange(n) % k)
    ranks = rng.permutation(n) + 1
    popularity = ranks.astype(np.float64) ** -cfg.zipf_s
    popularity /= popularity.sum()

    m = cfg.n_trips
    origin = rng.choice(n, size=m, p=popularity)
    flow = np.asarray(cfg.flow_matrix, dtype=np.float64)
    cdf = np.cumsum(flow, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(m)
    ocat = categories[origin]
    dcat = np.minimum((u[:, None] > cdf[ocat]).sum(axis=1), k - 1)

    dest = np.empty(m, dtype=np.int64)
    for c in range(k):
        sel = np.flatnonzero(dcat == c)
        members = np.flatnonzero(categories == c)
        p = popularity[members] / popularity[members].sum()
        dest[sel] = members[rng.choice(len(members), size=len(sel), p=p)]

    hours = np.empty(m)
    for i in range(k):
        for j in range(k):
            sel = np.flatnonzero((ocat == i) & (dcat == j))
            if len(sel):
                hours[sel] = _sample_hours(rng, cfg.time_profiles[f"{i},{j}"], len(sel))
    day = rng.integers(0, cfg.n_days, m)
    t0 = int(datetime.fromisoformat(cfg.start).replace(tzinfo=timezone.utc).timestamp())
    depart = t0 + day * 86400 + np.round(hours * 3600).astype(np.int64)
    dist = haversine_array(lats[origin], lons[origin], lats[dest], lons[dest])
    noise = rng.lognormal(mean=np.log(120.0), sigma=cfg.duration_noise_sigma, size=m)
    arrive = depart + np.round(dist / cfg.speed_mps + noise).astype(np.int64)

    order = np.argsort(depart, kind="stable")
    return SynthCity(lats, lons, categories, popularity, origin[order], dest[order],
                     depart[order], arrive[order])


def _iso(ts: np.ndarray) -> list[str]:
    return [str(x).replace("T", " ") for x in ts.astype("datetime64[s]")]


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write ``places.csv``, ``trips.csv`` and ``manifest.json`` into ``out_dir``.

    Returns the manifest. Output bytes depend only on the config.
    """
    city = simulate(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = [f"P{i:05d}" for i in range(cfg.n_places)]
    lats, lons = city.lats.tolist(), city.lons.tolist()
    with open(out / "places.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(PLACES_HEADER) + "\n")
        for i in range(cfg.n_places):
            fh.write(f"{ext[i]},{lats[i]!r},{lons[i]!r},"
                     f"{cfg.category_names[city.categories[i]]}\n")
    with open(out / "trips.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRIPS_HEADER) + "\n")
        for a, b, o, d in zip(_iso(city.depart), _iso(city.arrive), city.origin.tolist(),
                              city.dest.tolist()):
            fh.write(f"{a},{b},{lons[o]!r},{lats[o]!r},{lons[d]!r},{lats[d]!r}\n")

    k = cfg.n_categories
    trans = np.zeros((k, k), dtype=np.int64)
    np.add.at(trans, (city.categories[city.origin], city.categories[city.dest]), 1)
    manifest = {
        "config": json.loads(cfg.to_json()),
        "files": {"places": "places.csv", "trips": "trips.csv"},
        "stats": {
            "n_places": cfg.n_places,
            "n_trips": cfg.n_trips,
            "places_per_category": np.bincount(city.categories, minlength=k).tolist(),
            "transition_counts": trans.tolist(),
            "self_loops": int((city.origin == city.dest).sum()),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def city5(seed: int = 42, **overrides) -> SynthConfig:
    return SynthConfig(seed=seed, **overrides)


def load_config(path: Optional[str]) -> SynthConfig:
    if path is None:
        return city5()
    return SynthConfig.from_dict(json.loads(Path(path).read_text()))
