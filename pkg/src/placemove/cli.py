"""Command line entry point: ``placemove <command> [flags]``.

Exit codes: 0 success, 2 usage or input error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from placemove import synth
from placemove.evaluation import EvaluationError, match_rate, write_rank_freq
from placemove.ingest import DataError, write_trip_cache
from placemove.pipeline import (
    MODEL_KINDS,
    Dataset,
    RunConfig,
    eval_ids,
    evaluate_model,
    ingest,
    pair_source,
    train_model,
)
from placemove.trainer import init_model, load_embeddings, save_checkpoint, save_embeddings, train

log = logging.getLogger("placemove")

EXIT_USAGE = 2
EXIT_INTERNAL = 3

RUN_FLAGS = {f.name for f in fields(RunConfig)}
SWEEPABLE = {"window-hours": ("window_hours", float), "dim": ("dim", int), "epochs": ("epochs", int),
             "negatives": ("negatives", int), "max-contexts": ("max_contexts", int)}


class UsageError(Exception):
    pass


def _add_run_flags(p: argparse.ArgumentParser, data: bool = True, model: bool = True,
                   out_help: str = "output path") -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON run config; explicit flags override it")
    if data:
        p.add_argument("--places", default=S, help="places CSV")
        p.add_argument("--trips", default=S, help="trips CSV")
        p.add_argument("--snap-radius-m", dest="snap_radius_m", type=float, default=S)
        p.add_argument("--timezone", default=S, help="zone for naive timestamps (default UTC)")
    if model:
        p.add_argument("--model", choices=MODEL_KINDS, default=S)
        p.add_argument("--dim", type=int, default=S)
        p.add_argument("--epochs", type=int, default=S)
        p.add_argument("--negatives", type=int, default=S)
        p.add_argument("--lr", dest="lr_initial", type=float, default=S)
        p.add_argument("--window-hours", dest="window_hours", type=float, default=S)
        p.add_argument("--max-contexts", dest="max_contexts", type=_cap, default=S,
                       help="per-center OD context cap; 0 disables")
        p.add_argument("--k-neighbors", dest="k_neighbors", type=int, default=S)
        p.add_argument("--omega", type=float, default=S)
        p.add_argument("--bin-width-m", dest="bin_width_m", type=float, default=S)
        p.add_argument("--alpha", type=float, default=S)
        p.add_argument("--threads", type=int, default=S)
    p.add_argument("--holdout", type=float, default=S, help="evaluate a seeded random fraction")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S, help=out_help)


def _cap(text: str) -> Optional[int]:
    v = int(text)
    return None if v == 0 else v


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < explicit flags into a RunConfig."""
    merged = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        merged.update(json.loads(path.read_text()))
    for key, val in vars(args).items():
        if key in RUN_FLAGS:
            merged[key] = val
    try:
        return RunConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load(cfg: RunConfig) -> Dataset:
    places = _require_file(cfg.places, "places")
    trips = _require_file(cfg.trips, "trips")
    return ingest(places, trips, radius=cfg.snap_radius_m, tz=cfg.timezone)


def _out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    return Path(cfg.out)


def _write_report(prefix: Path, report) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.txt").write_text(report.to_text())
    Path(f"{prefix}.json").write_text(report.to_json())


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = synth.load_config(args.config)
    overrides = {k: v for k, v in (("seed", args.seed), ("n_trips", args.n_trips),
                                   ("n_places", args.n_places), ("n_days", args.n_days)) if v is not None}
    for k, v in overrides.items():
        setattr(cfg, k, v)
    try:
        manifest = synth.generate(cfg, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {manifest['stats']['n_places']} places and {manifest['stats']['n_trips']} "
          f"trips to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    out = _out(cfg)
    t0 = time.perf_counter()
    places = _require_file(cfg.places, "places")
    trips = _require_file(cfg.trips, "trips")
    ds = ingest(places, trips, radius=cfg.snap_radius_m, tz=cfg.timezone, use_cache=False)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trip_cache(out, ds.trips)
    stats = ds.drop_stats.as_dict()
    if len(ds.trips) != int(ds.counts.sum()) or stats["total"] != stats["retained"] + sum(stats["dropped"].values()):
        raise AssertionError("ingest conservation violated")
    Path(f"{out}.stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    if args.dump_rank_freq:
        write_rank_freq(args.dump_rank_freq, ds.trips)
    print(f"retained {stats['retained']}/{stats['total']} trips "
          f"({100 * stats['retention']:.1f}%) in {time.perf_counter() - t0:.1f}s")
    for reason, n in stats["dropped"].items():
        print(f"dropped {reason}={n} ({100 * n / max(stats['total'], 1):.1f}%)")
    return 0


def cmd_pairs(args) -> int:
    cfg = resolve_config(args)
    out = _out(cfg)
    ds = _load(cfg)
    pairs = pair_source(ds, cfg).generate(0)
    out.parent.mkdir(parents=True, exist_ok=True)
    pairs.write_csv(out)
    print(f"wrote {len(pairs)} {cfg.model} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out(cfg)
    ds = _load(cfg)
    model, stats = train_model(ds, cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(out, model, [p.external_id for p in ds.places], full_precision=args.full_precision)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model, cfg.train_config())
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats.as_dict(), indent=2) + "\n")
    print(f"trained {cfg.model} d={cfg.dim} epochs={cfg.epochs}: "
          f"{sum(e['pairs'] for e in stats.epochs)} pair updates -> {out}")
    return 0


def _vectors_for(ds: Dataset, path: Path) -> np.ndarray:
    ids, mat = load_embeddings(path)
    row = {ext: i for i, ext in enumerate(ids)}
    missing = [p.external_id for p in ds.places if p.external_id not in row]
    if missing:
        raise UsageError(f"{path}: no vector for {len(missing)} places (e.g. {missing[0]})")
    return mat[[row[p.external_id] for p in ds.places]]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = _out(cfg)
    emb = _require_file(args.embedding, "embedding")
    ds = _load(cfg)
    vectors = _vectors_for(ds, emb)
    report = evaluate_model(vectors, ds, cfg)
    _write_report(out, report)
    if args.dump_rank_freq:
        write_rank_freq(args.dump_rank_freq, ds.trips)
    if args.shuffled_control:
        ctl = shuffled_control(vectors, ds, cfg)
        Path(f"{out}.control.json").write_text(json.dumps(ctl, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(report.to_text())
    return 0


def shuffled_control(vectors: np.ndarray, ds: Dataset, cfg: RunConfig, repeats: int = 20) -> dict:
    """Match rate after permuting category labels among the evaluated places."""
    ids = eval_ids(ds, cfg)
    ids = ids[np.linalg.norm(vectors[ids], axis=1) > 0]
    cats = ds.place_cats
    rng = np.random.default_rng([cfg.seed, 6])
    rates = []
    for _ in range(repeats):
        shuffled = cats.copy()
        shuffled[ids] = rng.permutation(cats[ids])
        rates.append(match_rate(vectors, ids, shuffled).match_rate)
    marg = np.bincount(cats[ids]) / len(ids)
    return {"mean": float(np.mean(rates)), "rates": rates,
            "expected": float((marg ** 2).sum())}


def cmd_report(args) -> int:
    """Train and evaluate in one go, writing embedding + report into --out."""
    cfg = resolve_config(args)
    out = _out(cfg)
    ds = _load(cfg)
    model, stats = train_model(ds, cfg)
    report = evaluate_model(model.center, ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(out / "embedding.txt", model, [p.external_id for p in ds.places],
                    full_precision=args.full_precision)
    _write_report(out / "report", report)
    (out / "config.json").write_text(cfg.to_json())
    sys.stdout.write(report.to_text())
    return 0


def run_sweep(ds: Dataset, base: RunConfig, param: str, values: Sequence) -> list[dict]:
    field_name, _ = SWEEPABLE[param]
    rows = []
    sources = {}
    for v in values:
        cfg = RunConfig.from_dict({**base.to_dict(), field_name: v})
        # pair corpora depend only on pair-shaping settings; reuse across dim/epoch points
        key = (cfg.model, cfg.window_hours, cfg.max_contexts, cfg.seed)
        src = sources.setdefault(key, pair_source(ds, cfg))
        t0 = time.perf_counter()
        tcfg = cfg.train_config()
        model = init_model(ds.n_places, tcfg)
        train(model, src, tcfg, threads=cfg.threads)
        seconds = time.perf_counter() - t0
        rep = evaluate_model(model.center, ds, cfg, with_power_law=False)
        rows.append({param: v, "match_rate": rep.match_rate, "silhouette": rep.silhouette_mean,
                     "train_seconds": round(seconds, 3)})
        log.info("%s=%s match_rate=%.4f", param, v, rep.match_rate)
    return rows


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out = _out(cfg)
    _, conv = SWEEPABLE[args.param]
    try:
        values = [conv(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --values {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    ds = _load(cfg)
    rows = run_sweep(ds, cfg, args.param, values)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=[args.param, "match_rate", "silhouette"], lineterminator="\n",
                           extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{args.param}={r[args.param]} match_rate={r['match_rate']:.4f} "
              f"silhouette={_fmt(r['silhouette'])} ({r['train_seconds']:.1f}s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="placemove", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city (default: city5)")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-trips", dest="n_trips", type=int)
    p.add_argument("--n-places", dest="n_places", type=int)
    p.add_argument("--n-days", dest="n_days", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="snap trips to places and write the binary trip cache")
    _add_run_flags(p, model=False, out_help="snapped-trip cache file")
    p.add_argument("--dump-rank-freq", help="write rank,frequency CSV of trip origins")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pairs", help="dump one epoch of training pairs as CSV")
    _add_run_flags(p, out_help="pairs CSV")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", help="train embeddings (word2vec text output)")
    _add_run_flags(p, out_help="embedding file")
    p.add_argument("--full-precision", action="store_true", help="hexfloat values")
    p.add_argument("--checkpoint", help="also write a binary checkpoint")
    p.add_argument("--stats", help="write per-epoch training stats JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate an embedding file")
    _add_run_flags(p, model=False, out_help="report prefix (.txt and .json are written)")
    p.add_argument("--embedding", required=True)
    p.add_argument("--dump-rank-freq")
    p.add_argument("--shuffled-control", action="store_true",
                   help="also report match rate under permuted labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="vary one parameter, emit CSV of match rate and silhouette")
    _add_run_flags(p, out_help="sweep CSV")
    p.add_argument("--param", choices=sorted(SWEEPABLE), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="train + eval, writing everything into a directory")
    _add_run_flags(p, out_help="output directory")
    p.add_argument("--full-precision", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataError, EvaluationError, FileNotFoundError) as exc:
        print(f"placemove {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AssertionError, FloatingPointError) as exc:
        print(f"placemove {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
