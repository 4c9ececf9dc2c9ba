import csv
import json
import subprocess
import sys

import pytest

from tripletsearch.cli import main
from tripletsearch.dataset import load_dataset
from tripletsearch.embedding import load_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def small_csv(tmp_path):
    path = tmp_path / "small.csv"
    assert run("synth", "--n-classes", 3, "--items-per-class", 8, "--images-per-item", 2,
               "--dim", 6, "--two-domain", "--seed", 1, "-o", path) == 0
    return path


@pytest.fixture
def flat_csv(tmp_path):
    path = tmp_path / "flat.csv"
    assert run("synth", "--n-classes", 4, "--items-per-class", 10, "--images-per-item", 3,
               "--dim", 6, "--seed", 2, "-o", path) == 0
    return path


class TestSynth:
    def test_preset_row_count(self, tmp_path, capsys):
        out = tmp_path / "data.csv"
        assert run("synth", "--preset", "sop-like", "--seed", 7, "-o", out) == 0
        ds = load_dataset(out)
        assert len(ds) == 24 * 64 * 4
        assert "6144 records" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            run("synth", "--preset", "df-like", "--seed", 3, "-o", tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_single_image_items_rejected(self, tmp_path, capsys):
        assert run("synth", "--images-per-item", 1, "-o", tmp_path / "x.csv") != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "\n" not in err
        assert not (tmp_path / "x.csv").exists()


class TestTrain:
    def test_outputs_and_margin_metadata(self, tmp_path, small_csv, capsys):
        out = tmp_path / "run"
        assert run("train", "--data", small_csv, "--seed", 0, "--steps", 20, "--eval-every", 10,
                   "--batch-pairs", 4, "--out-dir", out) == 0
        assert {p.name for p in out.iterdir()} == {
            "checkpoint.json", "metrics.jsonl", "config.json", "report.json", "recall.csv", "confusion.csv"}
        _, meta = load_checkpoint(out / "checkpoint.json")
        assert meta["margin"] == 0.1
        lines = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
        assert len([e for e in lines if "eval" not in e]) == 20
        assert "R@1=" in capsys.readouterr().out

    def test_replay_from_resolved_config(self, tmp_path, small_csv):
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--data", small_csv, "--seed", 4, "--steps", 15, "--batch-pairs", 5,
            "--within-class-frac", 0.5, "--arch", "mlp1", "--hidden-dim", 7, "--out-dir", a)
        assert run("train", "--config", a / "config.json", "--out-dir", b) == 0
        for name in ("metrics.jsonl", "checkpoint.json", "report.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_flags_override_config(self, tmp_path, small_csv):
        a, b = tmp_path / "a", tmp_path / "b"
        run("train", "--data", small_csv, "--seed", 4, "--steps", 5, "--batch-pairs", 4, "--out-dir", a)
        run("train", "--config", a / "config.json", "--margin", 0.3, "--out-dir", b)
        cfg = json.loads((b / "config.json").read_text())
        assert cfg["train"]["margin"] == 0.3 and cfg["train"]["sampler"]["batch_pairs"] == 4

    def test_cross_pair_mode_needs_domains(self, tmp_path, flat_csv, capsys):
        assert run("train", "--data", flat_csv, "--seed", 0, "--pair-mode", "cross", "--out-dir", tmp_path / "r") != 0
        assert "error:" in capsys.readouterr().err

    def test_seed_required(self, tmp_path, flat_csv, capsys):
        assert run("train", "--data", flat_csv, "--out-dir", tmp_path / "r") != 0
        assert "--seed" in capsys.readouterr().err

    def test_within_class_fraction_in_log(self, tmp_path):
        out = tmp_path / "r"
        assert run("train", "--preset", "sop-like", "--seed", 2, "--steps", 400, "--batch-pairs", 8,
                   "--within-class-frac", 0.8, "--out-dir", out) == 0
        steps = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
        flags = [e["in_class"] for e in steps if "eval" not in e]
        # binomial(400, 0.8) has sd 0.02; allow 4 sd
        assert abs(sum(flags) / len(flags) - 0.8) < 0.08

    def test_missing_data_file(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "nope.csv", "--seed", 0, "--out-dir", tmp_path / "r") != 0
        assert capsys.readouterr().err.count("\n") == 1


class TestEval:
    def test_identity_on_separated_data(self, tmp_path, flat_csv):
        out = tmp_path / "e"
        assert run("eval", "--identity", "--data", flat_csv, "--out-dir", out) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["recall_at_k"]["1"] > 0
        rows = list(csv.reader(open(out / "recall.csv")))
        assert len(rows) == 1 + 7

    def test_deterministic(self, tmp_path, small_csv):
        for name in ("a", "b"):
            run("eval", "--identity", "--data", small_csv, "--out-dir", tmp_path / name)
        for f in ("report.json", "recall.csv", "confusion.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_protocol_mismatch(self, tmp_path, flat_csv):
        assert run("eval", "--identity", "--data", flat_csv, "--protocol", "cross-domain",
                   "--out-dir", tmp_path / "e") != 0

    def test_checkpoint(self, tmp_path, small_csv):
        run("train", "--data", small_csv, "--seed", 0, "--steps", 5, "--batch-pairs", 4, "--out-dir", tmp_path / "t")
        assert run("eval", "--checkpoint", tmp_path / "t" / "checkpoint.json", "--data", small_csv,
                   "--out-dir", tmp_path / "e") == 0
        a = json.loads((tmp_path / "t" / "report.json").read_text())
        b = json.loads((tmp_path / "e" / "report.json").read_text())
        assert a == b


class TestSweep:
    def sweep(self, out, *extra):
        return run("sweep", "--preset", "sop-like", "--seed", 10, "--steps", 30, "--test-fraction", 0.25,
                   "--out-dir", out, *extra)

    def test_batch_size_rows(self, tmp_path):
        assert self.sweep(tmp_path / "s", "--kind", "batch-size", "--values", 4, 16, 48) == 0
        rows = list(csv.DictReader(open(tmp_path / "s" / "sweep.csv")))
        assert [r["value"] for r in rows] == ["4", "16", "48"]
        seeds = [json.loads((tmp_path / "s" / d / "config.json").read_text())["train"]["seed"]
                 for d in sorted(p.name for p in (tmp_path / "s").iterdir() if p.is_dir())]
        assert seeds == [10, 11, 12]

    def test_within_class_schema_and_determinism(self, tmp_path):
        self.sweep(tmp_path / "a", "--kind", "within-class", "--values", 0.0, 0.8)
        self.sweep(tmp_path / "b", "--kind", "within-class", "--values", 0.0, 0.8, "--jobs", 2)
        text = (tmp_path / "a" / "sweep.csv").read_text()
        assert text == (tmp_path / "b" / "sweep.csv").read_text()
        rows = list(csv.DictReader(text.splitlines()))
        assert list(rows[0]) == ["value", "recall_at_1", "mean_nonzero_fraction"]
        assert all(0.0 <= float(r["mean_nonzero_fraction"]) <= 1.0 for r in rows)

    def test_bad_value_fails_before_training(self, tmp_path):
        assert self.sweep(tmp_path / "s", "--kind", "batch-size", "--values", 4, 1) != 0
        assert not (tmp_path / "s").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tripletsearch", "synth", "--images-per-item", "1",
                           "-o", str(tmp_path / "x.csv")], capture_output=True, text=True)
    assert proc.returncode != 0 and proc.stderr.startswith("error:")
