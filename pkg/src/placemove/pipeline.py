"""End-to-end orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from placemove.baselines import BASELINES, SpatialContextConfig, build_baseline_corpus
from placemove.evaluation import EvalReport, default_eval_set, evaluate, holdout, power_law_fit
from placemove.ingest import (
    DEFAULT_SNAP_RADIUS_M,
    DropStats,
    TripTable,
    build_index,
    checkin_counts,
    iter_raw_trips,
    load_places,
    place_categories,
    read_trip_cache,
    snap_trips,
    write_trip_cache,
)
from placemove.pairs import FixedPairSource, ODConfig, ODPairSource, PairSource, TripPairSource
from placemove.trainer import EmbeddingModel, TrainConfig, TrainStats, init_model, train

log = logging.getLogger(__name__)

MODEL_KINDS = ("trip", "od") + tuple(f"baseline:{b}" for b in BASELINES)


@dataclass
class RunConfig:
    places: Optional[str] = None
    trips: Optional[str] = None
    out: Optional[str] = None
    model: str = "od"
    dim: int = 180
    epochs: int = 6
    negatives: int = 5
    lr_initial: float = 0.025
    lr_min: float = 1e-4
    noise_power: float = 0.75
    window_hours: float = 1.0
    max_contexts: Optional[int] = 100
    snap_radius_m: float = DEFAULT_SNAP_RADIUS_M
    timezone: str = "UTC"
    k_neighbors: int = 10
    alpha: float = 1.0
    bin_width_m: float = 30.0
    omega: float = 0.4
    holdout: Optional[float] = None
    seed: int = 42
    threads: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        # component configs validate their own fields
        self.train_config()
        self.od_config()
        if self.model.startswith("baseline:"):
            self.baseline_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(dim=self.dim, epochs=self.epochs, negatives=self.negatives,
                           lr_initial=self.lr_initial, lr_min=self.lr_min,
                           noise_power=self.noise_power, seed=self.seed)

    def od_config(self) -> ODConfig:
        return ODConfig(window_seconds=self.window_hours * 3600.0,
                        max_contexts_per_center=self.max_contexts, seed=self.seed)

    def baseline_config(self) -> SpatialContextConfig:
        return SpatialContextConfig(model=self.model.split(":", 1)[1], k_neighbors=self.k_neighbors,
                                    alpha=self.alpha, bin_width_m=self.bin_width_m, omega=self.omega)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def cache_dir() -> Path:
    return Path(os.environ.get("PLACEMOVE_CACHE_DIR", Path.home() / ".cache" / "placemove"))


def _file_key(path) -> str:
    st = Path(path).stat()
    return f"{Path(path).resolve()}:{st.st_size}:{st.st_mtime_ns}"


@dataclass
class Dataset:
    places: list
    categories: list
    trips: TripTable
    counts: np.ndarray
    drop_stats: Optional[DropStats] = None

    @property
    def n_places(self) -> int:
        return len(self.places)

    @property
    def place_cats(self) -> np.ndarray:
        return place_categories(self.places)


def ingest(places_path, trips_path, radius: float = DEFAULT_SNAP_RADIUS_M, tz: str = "UTC",
           use_cache: bool = True) -> Dataset:
    """Load places, snap trips and cache the snapped table keyed by inputs and settings."""
    places, categories = load_places(places_path)
    cache_file = None
    if use_cache:
        key = hashlib.sha256(json.dumps(
            [_file_key(places_path), _file_key(trips_path), radius, tz]).encode()).hexdigest()[:20]
        cache_file = cache_dir() / f"trips-{key}.bin"
        if cache_file.exists():
            trips = read_trip_cache(cache_file)
            log.info("snapped trips loaded from cache %s", cache_file)
            return Dataset(places, categories, trips, checkin_counts(trips, len(places)))
    index = build_index(places, cell_size=radius)
    trips, counts, stats = snap_trips(iter_raw_trips(trips_path, tz=tz), index, len(places), radius)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_file.with_suffix(".tmp")
        write_trip_cache(tmp, trips)
        os.replace(tmp, cache_file)
    return Dataset(places, categories, trips, counts, stats)


def pair_source(ds: Dataset, cfg: RunConfig) -> PairSource:
    if cfg.model == "trip":
        return TripPairSource(ds.trips, seed=cfg.seed)
    if cfg.model == "od":
        return ODPairSource(ds.trips, cfg.od_config())
    bcfg = cfg.baseline_config()
    lats = np.array([p.location.lat for p in ds.places])
    lons = np.array([p.location.lon for p in ds.places])
    corpus = build_baseline_corpus(lats, lons, ds.place_cats, ds.counts, bcfg,
                                   n_types=len(ds.categories))
    return FixedPairSource(corpus, seed=cfg.seed, name=cfg.model)


def train_model(ds: Dataset, cfg: RunConfig) -> tuple[EmbeddingModel, TrainStats]:
    tcfg = cfg.train_config()
    model = init_model(ds.n_places, tcfg)
    stats = train(model, pair_source(ds, cfg), tcfg, threads=cfg.threads)
    return model, stats


def eval_ids(ds: Dataset, cfg: RunConfig) -> np.ndarray:
    ids = default_eval_set(ds.trips, ds.n_places)
    if cfg.holdout is not None:
        ids = holdout(ids, cfg.holdout, cfg.seed)
    return ids


def evaluate_model(vectors: np.ndarray, ds: Dataset, cfg: RunConfig,
                   with_power_law: bool = True) -> EvalReport:
    report = evaluate(vectors, eval_ids(ds, cfg), ds.place_cats, ds.categories)
    if with_power_law and len(np.unique(ds.trips.origin)) >= 3:
        report.power_law = power_law_fit(ds.trips)
    return report


def run(ds: Dataset, cfg: RunConfig) -> tuple[EmbeddingModel, TrainStats, EvalReport]:
    model, stats = train_model(ds, cfg)
    return model, stats, evaluate_model(model.center, ds, cfg)
