"""Training-pair generation for the Trip and OD context models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np

from placemove.ingest import TripTable

# named RNG sub-streams derived from the run seed
STREAM_PAIRS = 1
STREAM_SHUFFLE = 2


class TrainingPair(NamedTuple):
    center: int
    context: int


class PairArrays:
    """A batch of (center, context) pairs held as two int64 columns."""

    def __init__(self, centers, contexts, dropped: Optional[dict] = None):
        self.centers = np.asarray(centers, dtype=np.int64)
        self.contexts = np.asarray(contexts, dtype=np.int64)
        if self.centers.shape != self.contexts.shape:
            raise ValueError("centers and contexts differ in length")
        self.dropped = dict(dropped or {})

    def __len__(self) -> int:
        return len(self.centers)

    def __iter__(self) -> Iterator[TrainingPair]:
        for c, o in zip(self.centers.tolist(), self.contexts.tolist()):
            yield TrainingPair(c, o)

    def as_multiset(self):
        from collections import Counter
        return Counter(zip(self.centers.tolist(), self.contexts.tolist()))

    def shuffled(self, rng: np.random.Generator) -> "PairArrays":
        perm = rng.permutation(len(self))
        return PairArrays(self.centers[perm], self.contexts[perm], self.dropped)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("center_id,context_id\n")
            for c, o in zip(self.centers.tolist(), self.contexts.tolist()):
                fh.write(f"{c},{o}\n")


@dataclass(frozen=True)
class ODConfig:
    window_seconds: float = 3600.0
    max_contexts_per_center: Optional[int] = 100
    seed: int = 0

    def __post_init__(self):
        if not self.window_seconds > 0:
            raise ValueError("window_seconds must be positive")
        if self.max_contexts_per_center is not None and self.max_contexts_per_center < 1:
            raise ValueError("max_contexts_per_center must be >= 1 (or None to disable)")


def trip_pairs(trips: TripTable) -> PairArrays:
    """One (origin, destination) pair per trip; self-loops are dropped and counted."""
    keep = trips.origin != trips.dest
    return PairArrays(trips.origin[keep], trips.dest[keep],
                      {"self_loop": int((~keep).sum())})


def od_windows(trips: TripTable, window_seconds: float):
    """Sort trips by (destination, arrival) and find each trip's arrival window.

    Returns ``(order, lo, hi)``: ``order`` permutes trips into destination
    buckets sorted by arrival time, and for sorted position ``p`` the trips at
    sorted positions ``lo[p]:hi[p]`` share its destination and arrive within
    ``window_seconds`` of it (``p`` itself included).
    """
    n = len(trips)
    order = np.lexsort((np.arange(n), trips.arrive, trips.dest))
    dest = trips.dest[order]
    t = trips.arrive[order].astype(np.float64)
    lo = np.empty(n, dtype=np.int64)
    hi = np.empty(n, dtype=np.int64)
    if n == 0:
        return order, lo, hi
    starts = np.flatnonzero(np.r_[True, dest[1:] != dest[:-1]])
    ends = np.r_[starts[1:], n]
    for s, e in zip(starts, ends):
        tb = t[s:e]
        lo[s:e] = s + np.searchsorted(tb, tb - window_seconds, side="left")
        hi[s:e] = s + np.searchsorted(tb, tb + window_seconds, side="right")
    return order, lo, hi


def od_pairs(trips: TripTable, cfg: ODConfig, epoch: int = 0) -> PairArrays:
    """OD-model pairs: origins of other trips into the same place within the window.

    For every trip i the contexts are ``o_j`` for all j != i with ``d_j == d_i``
    and ``|dt_i - dt_j| <= window``; ``o_j == o_i`` is kept. Context sets larger
    than the cap are subsampled uniformly without replacement, seeded by
    ``(cfg.seed, epoch)``. Output runs bucket by bucket in destination-id order.
    """
    order, lo, hi = od_windows(trips, cfg.window_seconds)
    n_ctx = hi - lo - 1
    cap = cfg.max_contexts_per_center
    n_eff = n_ctx if cap is None else np.minimum(n_ctx, cap)
    total = int(n_eff.sum())
    pos = np.arange(len(order), dtype=np.int64)

    offsets = np.zeros(total, dtype=np.int64)
    row_start = np.cumsum(n_eff) - n_eff
    full = n_eff == n_ctx
    if full.any():
        reps = n_eff[full]
        base = np.repeat(row_start[full], reps)
        offsets_full = np.arange(int(reps.sum()), dtype=np.int64) - np.repeat(np.cumsum(reps) - reps, reps)
        offsets[base + offsets_full] = offsets_full
    capped = np.flatnonzero(~full)
    if len(capped):
        rng = np.random.default_rng([cfg.seed, STREAM_PAIRS, epoch])
        for p in capped:
            pick = np.sort(rng.choice(n_ctx[p], size=cap, replace=False))
            offsets[row_start[p]:row_start[p] + cap] = pick

    center_pos = np.repeat(pos, n_eff)
    ctx_pos = np.repeat(lo, n_eff) + offsets
    ctx_pos += ctx_pos >= center_pos  # step over the center trip itself
    origins = trips.origin[order]
    return PairArrays(origins[center_pos], origins[ctx_pos])


class PairSource:
    """Regenerates and shuffles one epoch's pairs on demand."""

    name = "pairs"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, epoch: int) -> PairArrays:
        raise NotImplementedError

    def epoch(self, epoch: int) -> PairArrays:
        rng = np.random.default_rng([self.seed, STREAM_SHUFFLE, epoch])
        return self.generate(epoch).shuffled(rng)

    def pairs_per_epoch(self) -> int:
        return len(self.generate(0))


class TripPairSource(PairSource):
    name = "trip"

    def __init__(self, trips: TripTable, seed: int = 0):
        super().__init__(seed)
        self._pairs = trip_pairs(trips)

    def generate(self, epoch: int) -> PairArrays:
        return self._pairs


class ODPairSource(PairSource):
    name = "od"

    def __init__(self, trips: TripTable, cfg: ODConfig):
        super().__init__(cfg.seed)
        self.trips = trips
        self.cfg = cfg
        self._first: Optional[PairArrays] = None

    def generate(self, epoch: int) -> PairArrays:
        if epoch == 0:
            if self._first is None:
                self._first = od_pairs(self.trips, self.cfg, 0)
            return self._first
        return od_pairs(self.trips, self.cfg, epoch)


class FixedPairSource(PairSource):
    """A corpus that does not change between epochs (baseline models)."""

    def __init__(self, pairs: PairArrays, seed: int = 0, name: str = "fixed"):
        super().__init__(seed)
        self._pairs = pairs
        self.name = name

    def generate(self, epoch: int) -> PairArrays:
        return self._pairs
