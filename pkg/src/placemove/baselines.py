"""Spatial-context baseline corpora (check-in, distance, combined, ITDL).

Each center place takes its k nearest places as contexts; every
(center, context) tuple is then replicated by an integer augmenting factor
beta >= 1 that depends on the chosen model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from placemove.geo import haversine_array
from placemove.pairs import PairArrays

BASELINES = ("checkin", "distance", "combined", "itdl")


@dataclass(frozen=True)
class SpatialContextConfig:
    model: str = "itdl"
    k_neighbors: int = 10
    alpha: float = 1.0
    bin_width_m: float = 30.0
    omega: float = 0.4
    distance_unit_m: float = 1000.0  # d(i, j) enters beta in kilometers by default
    beta_max: int = 1000

    def __post_init__(self):
        if self.model not in BASELINES:
            raise ValueError(f"unknown baseline {self.model!r}; choose from {BASELINES}")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not self.bin_width_m > 0:
            raise ValueError("bin_width_m must be positive")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.beta_max < 1:
            raise ValueError("beta_max must be >= 1")


@dataclass
class SpatialContexts:
    centers: np.ndarray
    contexts: np.ndarray
    dist_m: np.ndarray

    def __len__(self):
        return len(self.centers)


def spatial_contexts(lats, lons, k: int, chunk: int = 512) -> SpatialContexts:
    """The k nearest other places of every place by great-circle distance.

    Exhaustive per-row scan; equal distances keep the smaller place id first.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    n = len(lats)
    k = min(k, n - 1)
    if k <= 0:
        empty = np.empty(0, dtype=np.int64)
        return SpatialContexts(empty, empty, np.empty(0))
    centers, contexts, dists = [], [], []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        d = haversine_array(lats[s:e, None], lons[s:e, None], lats[None, :], lons[None, :])
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        centers.append(np.repeat(np.arange(s, e), k))
        contexts.append(nn.ravel())
        dists.append(np.take_along_axis(d, nn, axis=1).ravel())
    return SpatialContexts(np.concatenate(centers), np.concatenate(contexts), np.concatenate(dists))


@dataclass
class TypeStats:
    """Per (center, distance-bin) histograms of context types and their check-ins."""

    n_types: int
    type_totals: np.ndarray     # check-ins per type over all places
    group_keys: np.ndarray      # (G, 2): center id, bin index
    type_counts: np.ndarray     # (G, n_types): contexts of each type in the bin
    type_checkins: np.ndarray   # (G, n_types): check-ins of each type in the bin
    row_group: np.ndarray       # group of each context row
    activity: np.ndarray        # A per context row
    uniqueness: np.ndarray      # U per context row

    def frequencies(self) -> np.ndarray:
        return self.type_counts / self.type_counts.sum(axis=1, keepdims=True)


def activity(type_checkins_in_bin: float, bin_checkins: float) -> float:
    return -math.log2(1.0 - type_checkins_in_bin / (1.0 + bin_checkins))


def uniqueness(freq: float, n_in_bin: int, n_types: int) -> float:
    if freq > 0:
        return -math.log2(freq)
    # type absent from the bin: bounded stand-in instead of +inf
    return math.log2(n_in_bin + n_types)


def type_stats(categories, counts, ctx: SpatialContexts, bin_width_m: float,
               n_types: Optional[int] = None) -> TypeStats:
    categories = np.asarray(categories, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.float64)
    if n_types is None:
        n_types = int(categories.max()) + 1 if len(categories) else 0
    bins = np.floor(ctx.dist_m / bin_width_m).astype(np.int64)
    keys = np.stack([ctx.centers, bins], axis=1) if len(ctx) else np.empty((0, 2), dtype=np.int64)
    group_keys, row_group = np.unique(keys, axis=0, return_inverse=True)
    row_group = row_group.ravel()
    g = len(group_keys)
    ctx_types = categories[ctx.contexts]
    type_counts = np.zeros((g, n_types))
    type_checkins = np.zeros((g, n_types))
    np.add.at(type_counts, (row_group, ctx_types), 1.0)
    np.add.at(type_checkins, (row_group, ctx_types), counts[ctx.contexts])
    bin_total = type_checkins.sum(axis=1)
    bin_size = type_counts.sum(axis=1)

    p_type = type_checkins[row_group, ctx_types]
    act = -np.log2(1.0 - p_type / (1.0 + bin_total[row_group]))
    freq = type_counts[row_group, ctx_types] / np.maximum(bin_size[row_group], 1)
    with np.errstate(divide="ignore"):
        uniq = np.where(freq > 0, -np.log2(np.where(freq > 0, freq, 1.0)),
                        np.log2(bin_size[row_group] + n_types))
    type_totals = np.bincount(categories, weights=counts, minlength=n_types)
    return TypeStats(n_types, type_totals, group_keys, type_counts, type_checkins,
                     row_group, act + 0.0, uniq + 0.0)


def itdl_argument(a: float, u: float, omega: float) -> float:
    return omega * a + (1.0 - omega) * u


def beta(cfg: SpatialContextConfig, p_j: float = 0.0, d_ij_m: float = 0.0,
         mean_checkins: float = 0.0, a: float = 0.0, u: float = 0.0) -> int:
    """Integer augmenting factor of one (center, context) tuple, clamped to [1, beta_max]."""
    d = (d_ij_m / cfg.distance_unit_m) ** cfg.alpha
    if cfg.model == "checkin":
        raw = 1.0 + math.log(1.0 + p_j)
    elif cfg.model == "distance":
        raw = (1.0 + mean_checkins) / (1.0 + d)
    elif cfg.model == "combined":
        raw = (1.0 + math.log(1.0 + p_j)) / (1.0 + d)
    else:
        raw = itdl_argument(a, u, cfg.omega)
    return int(min(cfg.beta_max, max(1, math.ceil(raw))))


def beta_array(cfg: SpatialContextConfig, ctx: SpatialContexts, counts,
               stats: Optional[TypeStats] = None) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    p_j = counts[ctx.contexts]
    d = (ctx.dist_m / cfg.distance_unit_m) ** cfg.alpha
    if cfg.model == "checkin":
        raw = 1.0 + np.log1p(p_j)
    elif cfg.model == "distance":
        raw = (1.0 + counts.mean()) / (1.0 + d)
    elif cfg.model == "combined":
        raw = (1.0 + np.log1p(p_j)) / (1.0 + d)
    else:
        if stats is None:
            raise ValueError("itdl needs TypeStats")
        raw = cfg.omega * stats.activity + (1.0 - cfg.omega) * stats.uniqueness
    return np.clip(np.ceil(raw), 1, cfg.beta_max).astype(np.int64)


def baseline_pairs(ctx: SpatialContexts, counts, cfg: SpatialContextConfig,
                   stats: Optional[TypeStats] = None) -> PairArrays:
    """Replicate every spatial context tuple beta times."""
    b = beta_array(cfg, ctx, counts, stats)
    return PairArrays(np.repeat(ctx.centers, b), np.repeat(ctx.contexts, b))


def build_baseline_corpus(lats, lons, categories, counts, cfg: SpatialContextConfig,
                          n_types: Optional[int] = None) -> PairArrays:
    ctx = spatial_contexts(lats, lons, cfg.k_neighbors)
    stats = type_stats(categories, counts, ctx, cfg.bin_width_m, n_types) if cfg.model == "itdl" else None
    return baseline_pairs(ctx, counts, cfg, stats)
