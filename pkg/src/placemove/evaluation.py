"""Embedding quality metrics and rank-frequency analysis."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

BLOCK = 1024


class EvaluationError(ValueError):
    pass


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EvaluationError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def embedding_distance(a, b) -> float:
    return 1.0 - cosine_sim(a, b)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise EvaluationError("zero vector in evaluation set")
    return vectors / norms


def _similarity_block(unit: np.ndarray, start: int, stop: int) -> np.ndarray:
    sim = unit[start:stop] @ unit.T
    np.clip(sim, -1.0, 1.0, out=sim)
    return sim


@dataclass
class MatchResult:
    ids: np.ndarray        # evaluated place ids, ascending
    neighbors: np.ndarray  # cosine-nearest other place for each id
    matched: np.ndarray    # bool per id

    @property
    def match_rate(self) -> float:
        return float(self.matched.mean())


def match_rate(vectors: np.ndarray, eval_ids: Sequence[int], categories: np.ndarray) -> MatchResult:
    """Leave-one-out nearest neighbour category agreement.

    For each evaluated place the most cosine-similar *other* evaluated place is
    found (equal similarity resolves to the smaller id); it is a match when both
    share a category.
    """
    ids = np.unique(np.asarray(eval_ids, dtype=np.int64))
    if len(ids) < 2:
        raise EvaluationError("match rate needs at least two places")
    unit = _unit_rows(vectors[ids])
    neighbors = np.empty(len(ids), dtype=np.int64)
    for s in range(0, len(ids), BLOCK):
        e = min(s + BLOCK, len(ids))
        sim = _similarity_block(unit, s, e)
        sim[np.arange(e - s), np.arange(s, e)] = -np.inf
        neighbors[s:e] = ids[np.argmax(sim, axis=1)]
    cats = np.asarray(categories)
    return MatchResult(ids, neighbors, cats[ids] == cats[neighbors])


@dataclass
class SilhouetteResult:
    ids: np.ndarray
    scores: np.ndarray
    mean: float
    per_category: dict


def silhouette(vectors: np.ndarray, eval_ids: Sequence[int], categories: np.ndarray) -> SilhouetteResult:
    """Silhouette coefficients over cosine distance ``1 - cos``, clusters = categories.

    Members of singleton clusters score 0.
    """
    ids = np.unique(np.asarray(eval_ids, dtype=np.int64))
    labels_raw = np.asarray(categories)[ids]
    cats, labels = np.unique(labels_raw, return_inverse=True)
    if len(cats) < 2:
        raise EvaluationError("silhouette needs at least two categories")
    unit = _unit_rows(vectors[ids])
    n, k = len(ids), len(cats)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    sizes = onehot.sum(axis=0)
    sums = np.empty((n, k))
    for s in range(0, n, BLOCK):
        e = min(s + BLOCK, n)
        dist = 1.0 - _similarity_block(unit, s, e)
        dist[np.arange(e - s), np.arange(s, e)] = 0.0
        sums[s:e] = dist @ onehot
    own = sizes[labels]
    a = sums[np.arange(n), labels] / np.maximum(own - 1, 1)
    means = sums / sizes
    means[np.arange(n), labels] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom > 0, (b - a) / denom, 0.0)
    scores[own == 1] = 0.0
    per_cat = {int(c): float(scores[labels == i].mean()) for i, c in enumerate(cats)}
    return SilhouetteResult(ids, scores, float(scores.mean()), per_cat)


# -- rank / frequency ----------------------------------------------------------------

@dataclass
class PowerLawFit:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    degenerate: bool = False
    p_value_note: str = "p-value not computed"


def rank_frequency(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ranks 1..n and frequencies (descending) of the distinct values seen."""
    _, freq = np.unique(np.asarray(values), return_counts=True)
    freq = np.sort(freq)[::-1]
    return np.arange(1, len(freq) + 1), freq


def fit_log_log(ranks, freqs) -> PowerLawFit:
    """OLS of log(frequency) on log(rank)."""
    x = np.log(np.asarray(ranks, dtype=np.float64))
    y = np.log(np.asarray(freqs, dtype=np.float64))
    if len(x) < 3:
        raise EvaluationError("power-law fit needs at least 3 distinct points")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_tot = ((y - ym) ** 2).sum()
    if ss_tot <= 1e-12 * max(1.0, (y ** 2).sum()):
        return PowerLawFit(0.0, float(ym), 0.0, len(x), degenerate=True)
    ss_res = ((y - (intercept + slope * x)) ** 2).sum()
    r2 = float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))
    return PowerLawFit(float(slope), float(intercept), r2, len(x))


def power_law_fit(trips) -> PowerLawFit:
    """Fit the rank-frequency curve of trip origins."""
    ranks, freqs = rank_frequency(trips.origin)
    return fit_log_log(ranks, freqs)


def write_rank_freq(path, trips) -> None:
    ranks, freqs = rank_frequency(trips.origin)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,frequency\n")
        for r, f in zip(ranks.tolist(), freqs.tolist()):
            fh.write(f"{r},{f}\n")


# -- report ------------------------------------------------------------------------

@dataclass
class EvalReport:
    match_rate: float
    n_matched: int
    n_evaluated: int
    silhouette_mean: Optional[float]
    per_category_silhouette: dict = field(default_factory=dict)
    n_zero_excluded: int = 0
    power_law: Optional[PowerLawFit] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"match_rate={self.match_rate!r}",
                 f"n_matched={self.n_matched}",
                 f"n_evaluated={self.n_evaluated}",
                 f"n_zero_excluded={self.n_zero_excluded}",
                 f"silhouette_mean={self.silhouette_mean!r}"]
        for cat, val in self.per_category_silhouette.items():
            lines.append(f"silhouette[{cat}]={val!r}")
        if self.power_law is not None:
            pl = self.power_law
            lines += [f"power_law.slope={pl.slope!r}", f"power_law.intercept={pl.intercept!r}",
                      f"power_law.r_squared={pl.r_squared!r}", f"power_law.degenerate={pl.degenerate}"]
        return "\n".join(lines) + "\n"


def default_eval_set(trips, n_places: int) -> np.ndarray:
    """Places that occur as origin or destination of at least one trip."""
    seen = np.zeros(n_places, dtype=bool)
    seen[trips.origin] = True
    seen[trips.dest] = True
    return np.flatnonzero(seen)


def holdout(ids: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise EvaluationError("holdout fraction must be in (0, 1]")
    rng = np.random.default_rng([seed, 5])
    k = max(2, int(round(fraction * len(ids))))
    return np.sort(rng.choice(ids, size=min(k, len(ids)), replace=False))


def evaluate(vectors: np.ndarray, eval_ids: Sequence[int], categories: np.ndarray,
             category_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Match rate and silhouette over ``eval_ids``, skipping zero vectors.

    Silhouette is left as None when fewer than two categories are evaluated.
    """
    ids = np.unique(np.asarray(eval_ids, dtype=np.int64))
    nonzero = np.linalg.norm(vectors[ids], axis=1) > 0
    kept = ids[nonzero]
    mr = match_rate(vectors, kept, categories)
    names = (lambda c: category_names[c]) if category_names is not None else (lambda c: str(c))
    sil_mean, per_cat = None, {}
    if len(np.unique(np.asarray(categories)[kept])) >= 2:
        sil = silhouette(vectors, kept, categories)
        sil_mean = sil.mean
        per_cat = {names(c): v for c, v in sil.per_category.items()}
    return EvalReport(
        match_rate=mr.match_rate,
        n_matched=int(mr.matched.sum()),
        n_evaluated=len(kept),
        silhouette_mean=sil_mean,
        per_category_silhouette=per_cat,
        n_zero_excluded=int((~nonzero).sum()),
    )
