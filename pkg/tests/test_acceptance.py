"""End-to-end acceptance checks. Each test prints a single PASS/FAIL line."""

import math
import time
from collections import Counter
from contextlib import contextmanager

import numpy as np
import pytest

from placemove.baselines import SpatialContextConfig, beta, itdl_argument
from placemove.cli import main, run_sweep, shuffled_control
from placemove.evaluation import (
    cosine_sim,
    embedding_distance,
    fit_log_log,
    match_rate,
    rank_frequency,
    silhouette,
)
from placemove.ingest import TripTable
from placemove.pairs import FixedPairSource, ODConfig, PairArrays, od_pairs
from placemove.pipeline import RunConfig, evaluate_model, ingest, train_model
from placemove.synth import city5, generate
from placemove.trainer import (
    EmbeddingModel,
    TrainConfig,
    exact_softmax_objective,
    init_model,
    sgns_grad,
    sgns_loss,
    softmax_grad,
    train,
)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, name, budget_s):
        t0 = time.perf_counter()
        detail = {}
        try:
            yield detail
            elapsed = time.perf_counter() - t0
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
        except BaseException as exc:
            with capsys.disabled():
                print(f"\n[criterion {number}] FAIL {name}: {exc} {detail}")
            raise
        with capsys.disabled():
            print(f"\n[criterion {number}] PASS {name} ({elapsed:.1f}s) {detail}")
    return run


@pytest.fixture(scope="module")
def city5_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("city5")
    generate(city5(), root)
    return root


@pytest.fixture(scope="module")
def city5_ds(city5_data):
    return ingest(city5_data / "places.csv", city5_data / "trips.csv", use_cache=False)


def od_double_loop(trips, window):
    out = Counter()
    rows = list(trips)
    for i, ti in enumerate(rows):
        for j, tj in enumerate(rows):
            if i != j and tj.dest == ti.dest and abs(ti.arrive - tj.arrive) <= window:
                out[(ti.origin, tj.origin)] += 1
    return out


def test_od_pairs_equal_double_loop(criterion):
    with criterion(1, "OD pairs equal the double-loop enumeration", 30) as info:
        rng = np.random.default_rng(2024)
        worst = None
        for k in range(200):
            n = int(rng.integers(1, 1001))
            places = int(rng.integers(2, 40))
            span = int(rng.choice([3600, 6 * 3600, 86400]))
            arrive = rng.integers(0, span, n)
            trips = TripTable(rng.integers(0, places, n), rng.integers(0, places, n),
                              arrive - 600, arrive)
            window = float(rng.choice([60, 900, 3600]))
            got = od_pairs(trips, ODConfig(window_seconds=window, max_contexts_per_center=None))
            if got.as_multiset() != od_double_loop(trips, window):
                worst = k
                break
        info["instances"] = 200
        assert worst is None, f"instance {worst} differs"


def _finite_diff(f, model, eps=1e-5):
    grads = []
    for mat in (model.center, model.context):
        g = np.zeros_like(mat)
        for idx in np.ndindex(mat.shape):
            old = mat[idx]
            mat[idx] = old + eps
            up = f()
            mat[idx] = old - eps
            down = f()
            mat[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def _rel_err(analytic, numeric):
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-12))


def test_gradients(criterion):
    with criterion(2, "SGNS and softmax gradients match finite differences", 10) as info:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            m = EmbeddingModel(rng.normal(0, 0.5, (12, 8)), rng.normal(0, 0.5, (12, 8)))
            c, o = (int(x) for x in rng.choice(12, 2, replace=False))
            negs = [int(x) for x in rng.choice([i for i in range(12) if i != o], 5)]
            worst = max(worst, _rel_err(sgns_grad(m, c, o, negs),
                                        _finite_diff(lambda: sgns_loss(m, c, o, negs), m)))
            pair = PairArrays([c], [o])
            numeric = _finite_diff(lambda: -exact_softmax_objective(m, pair), m)
            worst = max(worst, _rel_err(softmax_grad(m, c, o), numeric))
        info["max_rel_err"] = worst
        assert worst < 1e-4


def test_objective_improves(criterion):
    with criterion(3, "exact-softmax training raises the objective", 5) as info:
        rng = np.random.default_rng(0)
        centers = rng.integers(0, 20, 500)
        contexts = (centers // 5) * 5 + rng.integers(0, 5, 500)
        cfg = TrainConfig(epochs=6, mode="exact_softmax")
        model = init_model(20, cfg)
        stats = train(model, FixedPairSource(PairArrays(centers, contexts)), cfg)
        info.update(init=stats.objective_init, final=stats.objectives[-1])
        assert stats.objectives[-1] > stats.objective_init


def test_city5_category_recovery(criterion, city5_ds):
    with criterion(4, "city5 category recovery", 300) as info:
        ds = city5_ds
        results = {}
        for model in ("od", "trip", "baseline:distance"):
            cfg = RunConfig(model=model)
            m, _ = train_model(ds, cfg)
            results[model] = (m.center, evaluate_model(m.center, ds, cfg, with_power_law=False))
        od_vec, od = results["od"]
        control = shuffled_control(od_vec, ds, RunConfig())["mean"]
        sil = {k: round(v[1].silhouette_mean, 4) for k, v in results.items()}
        info.update(od_match=od.match_rate, control=round(control, 4), silhouette=sil)
        assert od.match_rate >= 0.80
        assert od.match_rate - control >= 0.40
        assert sil["od"] >= sil["trip"] >= sil["baseline:distance"]


def test_metrics(criterion):
    with criterion(5, "metrics agree with brute-force recomputation", 10) as info:
        from sklearn.metrics import silhouette_samples

        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            n, d = int(rng.integers(10, 80)), int(rng.integers(2, 12))
            vecs = rng.normal(size=(n, d))
            cats = rng.integers(0, int(rng.integers(2, 6)), n)
            a, b = vecs[0], vecs[1]
            ref = sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
            worst = max(worst, abs(cosine_sim(a, b) - ref), abs(embedding_distance(a, b) - (1 - ref)))

            ids = np.arange(n)
            got = match_rate(vecs, ids, cats)
            matched = 0
            for i in range(n):
                sims = [(cosine_sim(vecs[i], vecs[j]), -j) for j in range(n) if j != i]
                j = -max(sims)[1]
                matched += cats[i] == cats[j]
            worst = max(worst, abs(got.match_rate - matched / n))

            if len(np.unique(cats)) >= 2:
                sil = silhouette(vecs, ids, cats)
                want = silhouette_samples(vecs, cats, metric="cosine")
                worst = max(worst, float(np.max(np.abs(sil.scores - want))))
        info["max_abs_err"] = worst
        assert worst < 1e-9


def test_power_law(criterion):
    with criterion(6, "power-law fit recovers Zipf slopes", 5) as info:
        ranks = np.arange(1, 501)
        exact = fit_log_log(ranks, 1e6 / ranks)
        rng = np.random.default_rng(42)
        probs = np.arange(1, 201, dtype=float) ** -1.2
        draws = rng.choice(200, size=10_000, p=probs / probs.sum())
        sampled = fit_log_log(*rank_frequency(draws))
        info.update(exact_slope=exact.slope, exact_r2=exact.r_squared, sampled_slope=sampled.slope)
        assert abs(exact.slope + 1) < 1e-9 and exact.r_squared >= 0.999
        assert abs(sampled.slope + 1.2) <= 0.15


def test_determinism(criterion, city5_data, tmp_path, monkeypatch):
    monkeypatch.setenv("PLACEMOVE_CACHE_DIR", str(tmp_path / "cache"))
    with criterion(7, "repeat city5 runs are byte-identical", 600) as info:
        flags = ["--places", str(city5_data / "places.csv"), "--trips", str(city5_data / "trips.csv"),
                 "--threads", "1"]
        for name in ("a", "b"):
            assert main(["report", *flags, "--out", str(tmp_path / name)]) == 0
        files = ("embedding.txt", "report.txt", "report.json")
        same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
        info.update(same)
        assert all(same.values())


def test_window_sweep_interior_peak(criterion, city5_ds):
    with criterion(8, "window sweep peaks at an interior value", 25 * 60) as info:
        hours = [0.25, 0.5, 1.0, 2.0, 4.0]
        rows = run_sweep(city5_ds, RunConfig(), "window-hours", hours)
        rates = [r["match_rate"] for r in rows]
        info["match_rates"] = dict(zip(hours, rates))
        best = max(rates)
        assert rates[0] < best and rates[-1] < best


def test_beta_factors(criterion):
    with criterion(9, "augmenting factors", 1):
        checkin = SpatialContextConfig(model="checkin")
        assert beta(checkin, p_j=0) == 1
        assert beta(checkin, p_j=100) == math.ceil(1 + math.log(101)) == 6
        assert beta(SpatialContextConfig(model="combined"), p_j=0, d_ij_m=0) == 1
        assert beta(SpatialContextConfig(model="distance"), d_ij_m=0, mean_checkins=0) == 1
        for a, u in [(0.0, 7.5), (3.2, 0.0), (11.0, 2.5), (4.4, 4.4)]:
            assert itdl_argument(a, u, 1.0) == a
            assert itdl_argument(a, u, 0.0) == u
            assert beta(SpatialContextConfig(model="itdl", omega=1.0), a=a, u=u) == max(1, math.ceil(a))
            assert beta(SpatialContextConfig(model="itdl", omega=0.0), a=a, u=u) == max(1, math.ceil(u))
        # changing U only matters when omega < 1, changing A only when omega > 0
        assert beta(SpatialContextConfig(model="itdl", omega=1.0), a=3.0, u=9.0) == \
            beta(SpatialContextConfig(model="itdl", omega=1.0), a=3.0, u=1.0)
        assert beta(SpatialContextConfig(model="itdl", omega=0.0), a=9.0, u=3.0) == \
            beta(SpatialContextConfig(model="itdl", omega=0.0), a=1.0, u=3.0)
