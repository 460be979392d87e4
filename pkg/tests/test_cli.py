"""CLI contracts: flags, exit codes, output file formats."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from spikeseg.cli import main
from spikeseg.data import load_manifest


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = run_cli(
        "gen", "--vocab", "6", "--utts", "10", "--eval-utts", "4",
        "--dim", "8", "--seed", "11", "--out-dir", str(out),
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = out / "toy.cfg"
    config.write_text(
        "d_model=16\nd_ff=24\nn_heads=2\nfrontend_channels=6,8\nboundary_channels=8\n"
        "warmup=10\n"
    )
    code = run_cli(
        "train", "--manifest", str(corpus_dir / "manifest.json"),
        "--config", str(config), "--dynamics", "vanilla",
        "--steps", "8", "--seed", "3", "--out-dir", str(out),
    )
    assert code == 0
    return out


class TestVersionAndUsage:
    def test_version_flag(self):
        proc = subprocess.run(
            [sys.executable, "-m", "spikeseg.cli", "--version"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert proc.stdout.startswith("spikeseg ")

    def test_help_exits_zero(self):
        proc = subprocess.run(
            [sys.executable, "-m", "spikeseg.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "simulate" in proc.stdout

    def test_unknown_dynamics_is_usage_error(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "spikeseg.cli", "simulate",
             "--dynamics", "fourth-order", "--out", str(tmp_path / "x.csv")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2

    def test_missing_file_exit_one(self, tmp_path, capsys):
        code = run_cli("eval", "--checkpoint", str(tmp_path / "nope.ckpt"),
                       "--manifest", str(tmp_path / "nope.json"))
        assert code == 1
        assert "nope.ckpt" in capsys.readouterr().err


class TestSimulate:
    def test_triangle_second_order_spikes(self, tmp_path, capsys):
        out = tmp_path / "trace.csv"
        code = run_cli("simulate", "--dynamics", "second-order", "--wave", "triangle",
                       "--steps", "500", "--out", str(out))
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "i", "v", "v_th", "u", "spike"]
        assert sum(int(r[5]) for r in rows[1:]) >= 1
        summary = json.loads(capsys.readouterr().out)
        assert summary["spike_count"] >= 1

    def test_constant_zero_never_spikes(self, tmp_path, capsys):
        out = tmp_path / "zero.csv"
        code = run_cli("simulate", "--dynamics", "vanilla", "--wave", "constant",
                       "--min", "0", "--max", "0", "--steps", "50", "--out", str(out))
        assert code == 0
        assert json.loads(capsys.readouterr().out)["spike_count"] == 0

    def test_constant_quarter_two_spikes_in_eight(self, tmp_path, capsys):
        out = tmp_path / "q.csv"
        code = run_cli("simulate", "--dynamics", "vanilla", "--wave", "constant",
                       "--min", "0.25", "--max", "0.25", "--steps", "8", "--out", str(out))
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["spike_count"] == 2 and summary["spike_steps"] == [4, 8]

    def test_params_file_override(self, tmp_path, capsys):
        params = tmp_path / "p.cfg"
        params.write_text("v_th0=0.2\n")
        out = tmp_path / "p.csv"
        code = run_cli("simulate", "--dynamics", "vanilla", "--wave", "constant",
                       "--min", "0.1", "--max", "0.1", "--steps", "10",
                       "--params-file", str(params), "--out", str(out))
        assert code == 0
        assert json.loads(capsys.readouterr().out)["spike_count"] == 5


class TestPhase:
    def test_report_json(self, capsys):
        code = run_cli("phase", "--current", "0")
        assert code == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["roots"] == pytest.approx([0.0, 0.820513], abs=1e-6)
        assert rep["stability"] == ["attractor", "repulsor"]
        assert rep["critical_current"] == pytest.approx(0.0179536, abs=1e-6)

    def test_degenerate_is_contract_error(self, tmp_path):
        code = run_cli("phase", "--a", "0")
        assert code == 2


class TestGen:
    def test_outputs_parse(self, corpus_dir):
        m = load_manifest(corpus_dir / "manifest.json")
        e = load_manifest(corpus_dir / "manifest_eval.json")
        assert len(m) == 10 and len(e) == 4
        assert (corpus_dir / "feats").is_dir()

    def test_deterministic_regeneration(self, corpus_dir, tmp_path):
        code = run_cli("gen", "--vocab", "6", "--utts", "10", "--eval-utts", "4",
                       "--dim", "8", "--seed", "11", "--out-dir", str(tmp_path))
        assert code == 0
        a = (corpus_dir / "manifest.json").read_text()
        b = (tmp_path / "manifest.json").read_text()
        assert a == b


class TestTrainEvalSegment:
    def test_train_artifacts(self, trained_dir):
        assert (trained_dir / "model_final.ckpt").exists()
        lines = (trained_dir / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 8
        assert set(json.loads(lines[0])) == {"step", "lr", "ce", "ctc", "qua", "total"}

    def test_eval_schema(self, corpus_dir, trained_dir, capsys):
        code = run_cli("eval", "--checkpoint", str(trained_dir / "model_final.ckpt"),
                       "--manifest", str(corpus_dir / "manifest_eval.json"),
                       "--beam", "1")
        assert code == 0
        metrics = json.loads(capsys.readouterr().out)
        assert {"per_mean", "per_std", "boundary_recall", "spikes_per_utt"} <= set(metrics)

    def test_eval_noise_keys(self, corpus_dir, trained_dir, capsys):
        code = run_cli("eval", "--checkpoint", str(trained_dir / "model_final.ckpt"),
                       "--manifest", str(corpus_dir / "manifest_eval.json"),
                       "--beam", "1", "--noise", "0.01")
        assert code == 0
        metrics = json.loads(capsys.readouterr().out)
        assert {"per_clean", "per_noisy", "relative_change"} <= set(metrics)

    def test_segment_outputs(self, corpus_dir, trained_dir, tmp_path, capsys):
        m = load_manifest(corpus_dir / "manifest_eval.json")
        utt_id = m.utterances[0].id
        out = tmp_path / "seg"
        code = run_cli("segment", "--checkpoint", str(trained_dir / "model_final.ckpt"),
                       "--manifest", str(corpus_dir / "manifest_eval.json"),
                       "--utt-id", utt_id, "--beam", "1", "--out", str(out))
        assert code == 0
        with open(out.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["frame", "current", "potential", "spike"]
        assert all(0.0 < float(r[1]) < 1.0 for r in rows[1:])
        payload = json.loads(out.with_suffix(".json").read_text())
        assert {"boundary_frames", "reference_boundaries", "hypothesis"} <= set(payload)

    def test_unknown_utterance_contract_error(self, corpus_dir, trained_dir, tmp_path):
        code = run_cli("segment", "--checkpoint", str(trained_dir / "model_final.ckpt"),
                       "--manifest", str(corpus_dir / "manifest_eval.json"),
                       "--utt-id", "missing", "--out", str(tmp_path / "s"))
        assert code == 2

    def test_unknown_config_key_contract_error(self, corpus_dir, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("learning_rate_banana=1\n")
        code = run_cli("train", "--manifest", str(corpus_dir / "manifest.json"),
                       "--config", str(config), "--dynamics", "vanilla",
                       "--steps", "1", "--out-dir", str(tmp_path / "r"))
        assert code == 2


@pytest.mark.slow
class TestSweep:
    def test_grid_csv(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "grid.csv"
        code = run_cli(
            "sweep", "--manifest", str(corpus_dir / "manifest.json"),
            "--eval-manifest", str(corpus_dir / "manifest_eval.json"),
            "--dynamics-list", "vanilla,second-order", "--layers-list", "1,2",
            "--steps", "4", "--seed", "0", "--beam", "1",
            "--out-dir", str(tmp_path / "runs"), "--out", str(out),
        )
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["dynamics", "enc_blocks", "per_mean", "boundary_recall"]
        assert len(rows) == 5  # header + 4 grid cells
