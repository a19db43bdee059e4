import csv
import json

import numpy as np
import pytest

from placemove.cli import main, resolve_config, build_parser
from placemove.ingest import load_places
from placemove.pipeline import RunConfig, evaluate_model, ingest, train_model
from placemove.synth import SynthConfig, generate
from placemove.trainer import init_model, load_embeddings


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("PLACEMOVE_CACHE_DIR", str(tmp_path / "cache"))


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    generate(SynthConfig(n_places=60, n_trips=3000, n_days=30, seed=11), root)
    return root


def data_flags(city):
    return ["--places", str(city / "places.csv"), "--trips", str(city / "trips.csv")]


SMALL = ["--dim", "16", "--epochs", "2"]


class TestExitCodes:
    def test_missing_places_is_usage_error(self, tmp_path, capsys):
        rc = main(["train", "--places", str(tmp_path / "nope.csv"), "--trips", "x", "--out", "o"])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_flag_value(self, city, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", *data_flags(city), "--dim", "abc", "--out", str(tmp_path / "e.txt")])
        assert exc.value.code == 2

    def test_invalid_config_value(self, city, tmp_path):
        rc = main(["train", *data_flags(city), "--dim", "0", "--out", str(tmp_path / "e.txt")])
        assert rc == 2

    def test_malformed_places(self, city, tmp_path):
        bad = tmp_path / "p.csv"
        bad.write_text("external_id,lat,lon,category\na,99,0,x\n")
        rc = main(["ingest", "--places", str(bad), "--trips", str(city / "trips.csv"),
                   "--out", str(tmp_path / "t.bin")])
        assert rc == 2


def test_ingest_reports_missing_coordinates(city, tmp_path, capsys):
    rows = list(csv.reader(open(city / "trips.csv")))
    header, body = rows[0], rows[1:]
    col = header.index("pickup_lat")
    for i in range(0, len(body), 10):
        body[i][col] = ""
    trips = tmp_path / "trips.csv"
    with open(trips, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([header, *body])
    out = tmp_path / "t.bin"
    assert main(["ingest", "--places", str(city / "places.csv"), "--trips", str(trips),
                 "--out", str(out)]) == 0
    stats = json.loads(open(f"{out}.stats.json").read())
    assert stats["dropped"]["missing_coords"] == len(range(0, len(body), 10))
    assert "missing_coords" in capsys.readouterr().out


def test_zero_epochs_returns_initialisation(city, tmp_path):
    out = tmp_path / "e.txt"
    assert main(["train", *data_flags(city), "--dim", "8", "--epochs", "0", "--seed", "3",
                 "--full-precision", "--out", str(out)]) == 0
    _, mat = load_embeddings(out)
    cfg = RunConfig(dim=8, epochs=0, seed=3)
    assert np.array_equal(mat, init_model(len(mat), cfg.train_config()).center)


def test_repeat_runs_identical(city, tmp_path):
    for name in ("a", "b"):
        assert main(["report", *data_flags(city), *SMALL, "--out", str(tmp_path / name)]) == 0
    for f in ("embedding.txt", "report.txt", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a, b = (json.loads((tmp_path / n / "config.json").read_text()) for n in "ab")
    assert {**a, "out": None} == {**b, "out": None}


def test_single_category_eval(tmp_path):
    generate(SynthConfig(n_places=30, n_trips=800, n_days=10, category_names=["a", "b"],
                         flow_matrix=[[1.0, 0.0], [0.0, 1.0]], seed=2), tmp_path / "c")
    places, _ = load_places(tmp_path / "c" / "places.csv")
    flat = tmp_path / "flat.csv"
    with open(flat, "w") as fh:
        fh.write("external_id,lat,lon,category\n")
        for p in places:
            fh.write(f"{p.external_id},{p.location.lat!r},{p.location.lon!r},only\n")
    flags = ["--places", str(flat), "--trips", str(tmp_path / "c" / "trips.csv")]
    assert main(["train", *flags, *SMALL, "--out", str(tmp_path / "e.txt")]) == 0
    assert main(["eval", *flags, "--embedding", str(tmp_path / "e.txt"),
                 "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["match_rate"] == 1.0 and rep["silhouette_mean"] is None


class TestConfigPrecedence:
    def parse(self, argv):
        return resolve_config(build_parser().parse_args(argv))

    def test_config_file_equals_flags(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({"dim": 32, "window_hours": 2.0, "model": "trip"}))
        from_file = self.parse(["train", "--config", str(cfg_path)])
        from_flags = self.parse(["train", "--dim", "32", "--window-hours", "2", "--model", "trip"])
        assert from_file == from_flags

    def test_flags_override_file(self, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({"dim": 32, "epochs": 3}))
        cfg = self.parse(["train", "--config", str(cfg_path), "--dim", "64"])
        assert (cfg.dim, cfg.epochs, cfg.negatives) == (64, 3, 5)

    def test_saved_config_round_trip(self, tmp_path):
        cfg = RunConfig(dim=12, max_contexts=None, holdout=0.5)
        (tmp_path / "c.json").write_text(cfg.to_json())
        assert self.parse(["train", "--config", str(tmp_path / "c.json")]) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"dimension": 3}))
        with pytest.raises(Exception, match="unknown"):
            self.parse(["train", "--config", str(tmp_path / "c.json")])


class TestSweep:
    def test_single_value_matches_direct_run(self, city, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", *data_flags(city), *SMALL, "--param", "window-hours",
                     "--values", "0.5", "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 1
        cfg = RunConfig(places=str(city / "places.csv"), trips=str(city / "trips.csv"),
                        dim=16, epochs=2, window_hours=0.5)
        ds = ingest(cfg.places, cfg.trips)
        model, _ = train_model(ds, cfg)
        rep = evaluate_model(model.center, ds, cfg, with_power_law=False)
        assert float(rows[0]["match_rate"]) == rep.match_rate
        assert float(rows[0]["silhouette"]) == rep.silhouette_mean

    def test_dimension_sweep_rows(self, city, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", *data_flags(city), "--epochs", "1", "--param", "dim",
                     "--values", "4,8,16", "--out", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["dim"] for r in rows] == ["4", "8", "16"]
        assert list(rows[0]) == ["dim", "match_rate", "silhouette"]

    def test_bad_values(self, city, tmp_path):
        assert main(["sweep", *data_flags(city), "--param", "dim", "--values", "x",
                     "--out", str(tmp_path / "s.csv")]) == 2


def test_cache_dir_env(city, tmp_path, monkeypatch):
    monkeypatch.setenv("PLACEMOVE_CACHE_DIR", str(tmp_path / "mycache"))
    assert main(["pairs", *data_flags(city), "--model", "trip", "--out", str(tmp_path / "p.csv")]) == 0
    cached = list((tmp_path / "mycache").glob("trips-*.bin"))
    assert len(cached) == 1
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "center_id,context_id"


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--n-trips", "100", "--seed", "1"]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["stats"]["n_trips"] == 100
