import csv
import json

import jsonschema
import numpy as np
import pytest

from aisfixture import HEADER, write_ais
from vesseltraj.checkpoint import load_checkpoint
from vesseltraj.cli import main
from vesseltraj.data.dataset import load_dataset
from vesseltraj.evaluation import REPORT_SCHEMA, ape, evaluate_predictions, ncv_baseline
from vesseltraj.model import ModelConfig, TrajectoryModel

SMALL = ["--set", "data.seq_in=4", "--set", "data.seq_out=4"]
TINY_MODEL = ["--set", "model.hidden=4", "--set", "train.batch_size=32", "--set", "train.lr=0.003"]


@pytest.fixture(scope="module")
def lines_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--scenario", "lines", "--n", "20", "--noise", "50", "--seed", "1", "--outdir", str(out), *SMALL]) == 0
    return out / "dataset.bin"


@pytest.fixture(scope="module")
def trained(lines_ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", str(lines_ds), "--epochs", "3", "--outdir", str(out), *TINY_MODEL]) == 0
    return out


class TestIngest:
    def test_ingest_and_determinism(self, tmp_path, capsys):
        csv_path = tmp_path / "ais.csv"
        write_ais(csv_path, n_rows=3000, seed=5, n_vessels=6)
        for k in range(2):
            assert main(["ingest", str(csv_path), "--outdir", str(tmp_path / f"o{k}")]) == 0
        man = json.loads((tmp_path / "o0" / "dataset.manifest.json").read_text())
        assert man["counts"]["train"]["windows"] > 0
        for name in ("dataset.manifest.json", "dataset.bin", "config.json"):
            assert (tmp_path / "o0" / name).read_bytes() == (tmp_path / "o1" / name).read_bytes()
        text = capsys.readouterr().out
        assert "skipped (malformed)" in text and "train:" in text

    def test_missing_mmsi_column(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(h for h in HEADER if h != "MMSI") + "\n")
        assert main(["ingest", str(p), "--outdir", str(tmp_path / "o")]) == 2
        assert "MMSI" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["ingest", str(tmp_path / "nope.csv"), "--outdir", str(tmp_path / "o")]) == 2

    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"data": {"bogus": 1}}))
        assert main(["synth", "--config", str(p), "--outdir", str(tmp_path / "o")]) == 1
        assert main(["synth", "--set", "nosection.x=1", "--outdir", str(tmp_path / "o")]) == 1


class TestSynth:
    def test_lines_noise_free_ncv_exact(self, tmp_path):
        assert main(["synth", "--scenario", "lines", "--n", "10", "--outdir", str(tmp_path)]) == 0
        ds = load_dataset(tmp_path / "dataset.bin")
        ws = ds["train"]
        x, y = ds.stats.denormalize(ws.x), ds.stats.denormalize(ws.y)
        pred = ncv_baseline(x, y.shape[1])
        for k in range(1, y.shape[1] + 1):
            assert ape(pred, y, k) < 1e-6

    def test_crossroad_balanced(self, tmp_path):
        assert main(["synth", "--scenario", "crossroad", "--n", "200", "--seed", "0", "--outdir", str(tmp_path)]) == 0
        man = json.loads((tmp_path / "dataset.manifest.json").read_text())
        counts = man["meta"]["class_counts"]
        assert len(counts) == 3 and sum(counts) == 200
        assert all(abs(c - 200 / 3) <= 0.2 * 200 / 3 for c in counts)
        assert man["vocab"] == ["branch+35", "branch+0", "branch-35"]

    def test_same_seed_identical(self, tmp_path):
        for k in range(2):
            main(["synth", "--scenario", "crossroad", "--n", "30", "--seed", "4", "--outdir", str(tmp_path / str(k))])
        assert (tmp_path / "0" / "dataset.bin").read_bytes() == (tmp_path / "1" / "dataset.bin").read_bytes()


class TestTrain:
    def test_outputs(self, trained):
        for name in ("model.ckpt", "train_log.csv", "config.json"):
            assert (trained / name).exists()
        rows = list(csv.DictReader((trained / "train_log.csv").open()))
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
        assert rows[0]["val_ape_1h"] != ""
        cfg = json.loads((trained / "config.json").read_text())
        assert cfg["model"]["hidden"] == 4 and cfg["train"]["max_epochs"] == 3

    def test_resume_continues_epochs(self, lines_ds, trained, tmp_path):
        out = tmp_path / "r"
        assert main(["train", str(lines_ds), "--epochs", "2", "--resume", str(trained / "model.ckpt"), "--outdir", str(out), *TINY_MODEL]) == 0
        rows = list(csv.DictReader((out / "train_log.csv").open()))
        assert [int(r["epoch"]) for r in rows] == [4, 5]
        assert load_checkpoint(out / "model.ckpt").epoch == 5

    def test_mae_freezes_covariance_head(self, lines_ds, tmp_path):
        b = tmp_path / "b"
        assert main(["train", str(lines_ds), "--epochs", "2", "--loss", "mae", "--outdir", str(b), *TINY_MODEL]) == 0
        # seed 0 init is what the CLI starts from
        init = TrajectoryModel.init(ModelConfig(hidden=4, seq_in=4, seq_out=4), 0)
        mb = load_checkpoint(b / "model.ckpt").model
        for name in ("head_sigma.W", "head_sigma.b"):
            np.testing.assert_array_equal(mb.params[name].data, init.params[name].data)
        assert not np.array_equal(mb.params["head_mu.W"].data, init.params["head_mu.W"].data)

    def test_vocab_mismatch_on_resume(self, tmp_path):
        main(["synth", "--scenario", "crossroad", "--n", "30", "--outdir", str(tmp_path / "c"), *SMALL])
        assert main(["train", str(tmp_path / "c" / "dataset.bin"), "--epochs", "1", "--outdir", str(tmp_path / "t"), *TINY_MODEL]) == 0
        main(["synth", "--scenario", "lines", "--n", "20", "--outdir", str(tmp_path / "l"), *SMALL])
        code = main(["train", str(tmp_path / "l" / "dataset.bin"), "--epochs", "1", "--resume", str(tmp_path / "t" / "model.ckpt"), "--outdir", str(tmp_path / "u")])
        assert code == 1


class TestPredict:
    def test_deterministic_without_dropout(self, lines_ds, tmp_path):
        main(["train", str(lines_ds), "--epochs", "1", "--outdir", str(tmp_path / "m"), *TINY_MODEL, "--set", "model.rec_dropout=0"])
        ck = tmp_path / "m" / "model.ckpt"
        for k in range(2):
            assert main(["predict", str(ck), "--dataset", str(lines_ds), "--max-windows", "3", "--samples", "1", "--outdir", str(tmp_path / f"p{k}")]) == 0
        a, b = (tmp_path / "p0" / "predictions.geojson").read_bytes(), (tmp_path / "p1" / "predictions.geojson").read_bytes()
        assert a == b
        fc = json.loads(a)
        preds = [f for f in fc["features"] if f["properties"]["kind"] == "prediction"]
        assert len(preds) == 3 and all(len(f["geometry"]["coordinates"]) == 4 for f in preds)

    def test_track_input(self, trained, tmp_path):
        track = tmp_path / "track.csv"
        rows = ["timestamp,lat,lon"] + [f"2020-01-01 {h:02d}:{m:02d}:00,56.0,{10 + 0.01 * (4 * h + m / 15):.5f}" for h in range(2) for m in (0, 15, 30, 45)]
        track.write_text("\n".join(rows) + "\n")
        out = tmp_path / "p"
        assert main(["predict", str(trained / "model.ckpt"), "--track", str(track), "--samples", "5", "--with-samples", "--outdir", str(out)]) == 0
        fc = json.loads((out / "predictions.geojson").read_text())
        assert sum(f["properties"]["kind"] == "sample" for f in fc["features"]) == 5
        assert len(list(csv.reader((out / "predictions.csv").open()))) == 1 + 4

    def test_short_track(self, trained, tmp_path):
        track = tmp_path / "track.csv"
        track.write_text("easting,northing\n1,2\n3,4\n")
        assert main(["predict", str(trained / "model.ckpt"), "--track", str(track), "--outdir", str(tmp_path / "p")]) == 1


class TestEvaluate:
    def test_report(self, trained, lines_ds, tmp_path):
        out = tmp_path / "e"
        assert main(["evaluate", str(trained / "model.ckpt"), str(lines_ds), "--samples", "4", "--outdir", str(out)]) == 0
        doc = json.loads((out / "report.json").read_text())
        jsonschema.validate(doc, REPORT_SCHEMA)
        assert doc["extra"]["samples"] == 4
        assert (out / "bins.csv").exists() and (out / "coverage.csv").exists()

    def test_labeled_ablation_and_vocab_guard(self, tmp_path):
        main(["synth", "--scenario", "crossroad", "--n", "30", "--outdir", str(tmp_path / "c"), *SMALL])
        main(["train", str(tmp_path / "c" / "dataset.bin"), "--epochs", "1", "--outdir", str(tmp_path / "t"), *TINY_MODEL])
        ck = str(tmp_path / "t" / "model.ckpt")
        assert main(["evaluate", ck, str(tmp_path / "c" / "dataset.bin"), "--samples", "2", "--outdir", str(tmp_path / "e")]) == 0
        assert (tmp_path / "e" / "report_psi_zero.json").exists()
        main(["synth", "--scenario", "lines", "--n", "20", "--outdir", str(tmp_path / "l"), *SMALL])
        assert main(["evaluate", ck, str(tmp_path / "l" / "dataset.bin"), "--outdir", str(tmp_path / "e2")]) == 1

    def test_perfect_predictor(self):
        truth = np.random.default_rng(0).normal(size=(5, 12, 2)) * 1e4
        rep = evaluate_predictions(truth, np.broadcast_to(np.eye(2), (5, 12, 2, 2)), truth, truth[:, 0], (0.0, 0.0))
        assert all(v == 0.0 for v in rep.ape_m.values()) and rep.ade_m == 0.0


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "15/15 tensors pass" in capsys.readouterr().out

    def test_sabotage(self, capsys):
        assert main(["gradcheck", "--sabotage", "attn.v"]) == 3
        captured = capsys.readouterr()
        assert "attn.v" in captured.err and "14/15" in captured.out

    def test_unknown_sabotage_target(self):
        assert main(["gradcheck", "--sabotage", "nope"]) == 1
