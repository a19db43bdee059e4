"""Skip-gram trainer: negative-sampling SGD plus an exact-softmax mode.

The negative-sampling inner loop runs in numba (``nogil``) so that several
Python threads can update the shared matrices Hogwild-style. With one thread
every random draw comes from seeded streams and runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from placemove.pairs import PairArrays, PairSource

log = logging.getLogger(__name__)

STREAM_INIT = 3
STREAM_NEG = 4
EXACT_SOFTMAX_MAX_PLACES = 10_000
MODES = ("negative_sampling", "exact_softmax")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 180
    epochs: int = 6
    negatives: int = 5
    lr_initial: float = 0.025
    lr_min: float = 1e-4
    noise_power: float = 0.75
    seed: int = 0
    mode: str = "negative_sampling"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "negative_sampling" and self.negatives < 1:
            raise ValueError("negatives must be >= 1 in negative_sampling mode")
        if not 0 < self.lr_min <= self.lr_initial:
            raise ValueError("need 0 < lr_min <= lr_initial")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EmbeddingModel:
    center: np.ndarray   # (|N|, d), the reported place vectors
    context: np.ndarray  # (|N|, d)

    def __post_init__(self):
        if self.center.shape != self.context.shape:
            raise ValueError("center and context matrices differ in shape")

    @property
    def n_places(self) -> int:
        return self.center.shape[0]

    @property
    def dim(self) -> int:
        return self.center.shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.center.copy(), self.context.copy())


@dataclass
class TrainStats:
    epochs: list = field(default_factory=list)
    objective_init: Optional[float] = None

    @property
    def objectives(self) -> list:
        return [e["objective"] for e in self.epochs]

    def as_dict(self) -> dict:
        return {"objective_init": self.objective_init, "epochs": self.epochs}


class NoiseTable:
    """Sampling distribution for negatives, proportional to freq ** power."""

    def __init__(self, freq: np.ndarray, power: float = 0.75):
        freq = np.asarray(freq, dtype=np.float64)
        w = np.where(freq > 0, freq ** power, 0.0)
        if w.sum() <= 0:
            raise ValueError("noise distribution has empty support")
        self.probs = w / w.sum()
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        self.cdf = cdf

    @classmethod
    def from_contexts(cls, contexts: np.ndarray, n_places: int, power: float = 0.75) -> "NoiseTable":
        return cls(np.bincount(contexts, minlength=n_places), power)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)

    def sample(self, rng: np.random.Generator, k: int, exclude: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        for i in range(k):
            out[i] = _draw_negative(self.cdf, exclude, rng.random)
        return out


def _draw_negative(cdf, exclude, uniform, attempts=64):
    for _ in range(attempts):
        j = int(np.searchsorted(cdf, uniform(), side="right"))
        j = min(j, len(cdf) - 1)
        if j != exclude:
            return j
    return -1


def init_model(n_places: int, cfg: TrainConfig) -> EmbeddingModel:
    if n_places < 1:
        raise ValueError("need at least one place")
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    half = 0.5 / cfg.dim
    center = rng.uniform(-half, half, size=(n_places, cfg.dim))
    return EmbeddingModel(center, np.zeros((n_places, cfg.dim)))


# -- negative sampling ----------------------------------------------------------

@numba.njit(cache=True, nogil=True, fastmath=False)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True)
def _sgns_update(center, context, c, o, negs, lr, work):
    """One SGD step on -log s(u_o.v_c) - sum log s(-u_n.v_c); negs < 0 are skipped."""
    d = center.shape[1]
    v = center[c]
    for k in range(d):
        work[k] = 0.0
    for t in range(len(negs) + 1):
        if t == 0:
            target = o
            label = 1.0
        else:
            target = negs[t - 1]
            label = 0.0
            if target < 0:
                continue
        u = context[target]
        dot = 0.0
        for k in range(d):
            dot += u[k] * v[k]
        g = (label - _sigmoid(dot)) * lr
        for k in range(d):
            work[k] += g * u[k]
        for k in range(d):
            u[k] += g * v[k]
    for k in range(d):
        v[k] += work[k]


@numba.njit(cache=True, nogil=True)
def _lcg_uniform(state):
    state[0] = state[0] * np.uint64(25214903917) + np.uint64(11)
    return (state[0] >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True, nogil=True)
def _sgns_run(center, context, centers, contexts, cdf, n_neg, lr0, lr_min,
              done, total, rng_state):
    d = center.shape[1]
    work = np.empty(d)
    negs = np.empty(n_neg, dtype=np.int64)
    last = len(cdf) - 1
    for i in range(len(centers)):
        frac = (done + i) / total
        lr = lr0 - (lr0 - lr_min) * frac
        if lr < lr_min:
            lr = lr_min
        o = contexts[i]
        for t in range(n_neg):
            negs[t] = -1
            for _ in range(64):
                j = np.searchsorted(cdf, _lcg_uniform(rng_state), side="right")
                if j > last:
                    j = last
                if j != o:
                    negs[t] = j
                    break
        _sgns_update(center, context, centers[i], o, negs, lr, work)


def sgns_step(model: EmbeddingModel, pair, lr: float, noise: Optional[NoiseTable] = None,
              rng: Optional[np.random.Generator] = None, negatives: int | Sequence[int] = 5) -> np.ndarray:
    """Apply one negative-sampling update in place and return the negatives used.

    ``negatives`` is either a count (drawn from ``noise`` with ``rng``,
    redrawing any draw equal to the true context) or an explicit id list.
    """
    c, o = int(pair[0]), int(pair[1])
    if isinstance(negatives, (int, np.integer)):
        negs = noise.sample(rng, int(negatives), exclude=o)
    else:
        negs = np.asarray(negatives, dtype=np.int64)
    _sgns_update(model.center, model.context, c, o, negs, float(lr), np.empty(model.dim))
    return negs


def sgns_loss(model: EmbeddingModel, c: int, o: int, negs: Sequence[int]) -> float:
    v = model.center[c]
    loss = np.logaddexp(0.0, -model.context[o] @ v)
    for n in negs:
        loss += np.logaddexp(0.0, model.context[n] @ v)
    return float(loss)


def sgns_grad(model: EmbeddingModel, c: int, o: int, negs: Sequence[int]):
    """Gradient of ``sgns_loss`` as dense (d_center, d_context) matrices."""
    g_center = np.zeros_like(model.center)
    g_context = np.zeros_like(model.context)
    v = model.center[c]
    for target, label in [(o, 1.0)] + [(n, 0.0) for n in negs]:
        u = model.context[target]
        s = 1.0 / (1.0 + np.exp(-(u @ v)))
        g = s - label
        g_center[c] += g * u
        g_context[target] += g * v
    return g_center, g_context


# -- exact softmax ----------------------------------------------------------------

def _check_exact(model: EmbeddingModel):
    if model.n_places > EXACT_SOFTMAX_MAX_PLACES:
        raise ValueError(f"exact softmax limited to {EXACT_SOFTMAX_MAX_PLACES} places, "
                         f"model has {model.n_places}")


def _log_softmax_rows(model: EmbeddingModel, centers: np.ndarray) -> np.ndarray:
    scores = model.center[centers] @ model.context.T
    scores -= scores.max(axis=1, keepdims=True)
    return scores - np.log(np.exp(scores).sum(axis=1, keepdims=True))


def exact_softmax_objective(model: EmbeddingModel, pairs: PairArrays) -> float:
    """Average log p(context | center) with the softmax taken over every place."""
    _check_exact(model)
    if len(pairs) == 0:
        return 0.0
    total = 0.0
    for s in range(0, len(pairs), 4096):
        c = pairs.centers[s:s + 4096]
        o = pairs.contexts[s:s + 4096]
        total += _log_softmax_rows(model, c)[np.arange(len(c)), o].sum()
    return float(total / len(pairs))


def softmax_grad(model: EmbeddingModel, c: int, o: int):
    """Gradient of -log p(o | c) as dense (d_center, d_context) matrices."""
    v = model.center[c]
    scores = model.context @ v
    p = np.exp(scores - scores.max())
    p /= p.sum()
    err = p.copy()
    err[o] -= 1.0
    g_center = np.zeros_like(model.center)
    g_center[c] = err @ model.context
    g_context = np.outer(err, v)
    return g_center, g_context


def softmax_step(model: EmbeddingModel, c: int, o: int, lr: float) -> None:
    v = model.center[c].copy()
    scores = model.context @ v
    p = np.exp(scores - scores.max())
    p /= p.sum()
    p[o] -= 1.0
    g_v = p @ model.context
    model.context -= lr * np.outer(p, v)
    model.center[c] -= lr * g_v


# -- training loop ------------------------------------------------------------------

def _run_sharded(model, pairs, cdf, cfg, done, total, seeds, threads):
    bounds = np.linspace(0, len(pairs), threads + 1).astype(np.int64)
    jobs = []
    for t in range(threads):
        s, e = bounds[t], bounds[t + 1]
        # each shard walks its own slice of the schedule
        shard_done = done + s
        jobs.append(threading.Thread(target=_sgns_run, args=(
            model.center, model.context, pairs.centers[s:e], pairs.contexts[s:e], cdf,
            cfg.negatives, cfg.lr_initial, cfg.lr_min, shard_done, total,
            np.array([seeds[t]], dtype=np.uint64))))
    for j in jobs:
        j.start()
    for j in jobs:
        j.join()


def train(model: EmbeddingModel, source: PairSource, cfg: TrainConfig,
          threads: int = 1) -> TrainStats:
    """Run ``cfg.epochs`` passes over freshly generated pairs, updating in place.

    The learning rate falls linearly from ``lr_initial`` to ``lr_min`` across
    all scheduled pairs. ``threads > 1`` trains shards concurrently with racy
    shared writes (negative-sampling mode only) and is not reproducible.
    """
    stats = TrainStats()
    if cfg.epochs == 0:
        return stats
    exact = cfg.mode == "exact_softmax"
    if exact:
        _check_exact(model)
        if threads != 1:
            raise ValueError("exact_softmax mode is single-threaded")
    per_epoch = source.pairs_per_epoch()
    total = max(1, per_epoch * cfg.epochs)
    noise = None
    done = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        pairs = source.epoch(epoch)
        if exact:
            if epoch == 0:
                stats.objective_init = exact_softmax_objective(model, pairs)
            for i, (c, o) in enumerate(zip(pairs.centers.tolist(), pairs.contexts.tolist())):
                lr = max(cfg.lr_min, cfg.lr_initial - (cfg.lr_initial - cfg.lr_min) * (done + i) / total)
                softmax_step(model, c, o, lr)
        elif len(pairs):
            if noise is None:
                noise = NoiseTable.from_contexts(pairs.contexts, model.n_places, cfg.noise_power)
            seeds = np.random.default_rng([cfg.seed, STREAM_NEG, epoch]).integers(
                1, 2**63, size=threads, dtype=np.uint64)
            if threads == 1:
                _sgns_run(model.center, model.context, pairs.centers, pairs.contexts, noise.cdf,
                          cfg.negatives, cfg.lr_initial, cfg.lr_min, done, total,
                          np.array([seeds[0]], dtype=np.uint64))
            else:
                _run_sharded(model, pairs, noise.cdf, cfg, done, total, seeds, threads)
        done += len(pairs)
        entry = {"epoch": epoch, "pairs": len(pairs),
                 "lr": max(cfg.lr_min, cfg.lr_initial - (cfg.lr_initial - cfg.lr_min) * done / total),
                 "seconds": round(time.perf_counter() - t0, 3), "objective": None}
        if exact:
            entry["objective"] = exact_softmax_objective(model, pairs)
        stats.epochs.append(entry)
        log.info("epoch %d: %d pairs in %.2fs", epoch, len(pairs), entry["seconds"])
    if not (np.isfinite(model.center).all() and np.isfinite(model.context).all()):
        raise FloatingPointError("non-finite values in embedding matrices after training")
    return stats


# -- persistence ---------------------------------------------------------------------

def save_embeddings(path, model: EmbeddingModel, external_ids: Sequence[str],
                    full_precision: bool = False) -> None:
    """word2vec text format: ``|N| d`` header, then ``external_id v_1 ... v_d``."""
    if len(external_ids) != model.n_places:
        raise ValueError("one external id per place required")
    fmt = float.hex if full_precision else (lambda x: f"{x:.6g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{model.n_places} {model.dim}\n")
        for ext, row in zip(external_ids, model.center.tolist()):
            fh.write(ext + " " + " ".join(fmt(x) for x in row) + "\n")


def _parse_float(tok: str) -> float:
    return float.fromhex(tok) if "x" in tok else float(tok)


def load_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        n, d = (int(x) for x in fh.readline().split())
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            if len(parts) != d + 1:
                raise ValueError(f"{path}: expected {d + 1} fields, got {len(parts)}")
            ids.append(parts[0])
            rows.append([_parse_float(t) for t in parts[1:]])
    if len(ids) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(ids)}")
    return ids, np.array(rows, dtype=np.float64).reshape(n, d)


def save_checkpoint(path, model: EmbeddingModel, cfg: TrainConfig) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, center=model.center, context=model.context,
                 config_hash=np.array(cfg.digest()))


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> EmbeddingModel:
    with np.load(path) as z:
        if cfg is not None and str(z["config_hash"]) != cfg.digest():
            raise ValueError(f"{path}: checkpoint was written under a different config")
        return EmbeddingModel(z["center"].copy(), z["context"].copy())
