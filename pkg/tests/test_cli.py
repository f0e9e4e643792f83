"""Command-line surface: dispatch, config precedence, verb plumbing."""
import json
import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from signforge.cli import config_file, dispatch, resolve_train_config, UserError
from signforge.dataset import DatasetManifest
from signforge.synth import synth_shapes


def run(*argv):
    return dispatch(list(argv))


class TestDispatch:
    def test_unknown_verb_exits_1(self, capsys):
        assert run("frobnicate") == 1

    def test_help_exits_0(self):
        assert run("--help") == 0

    def test_user_error_exit_code(self, tmp_path, capsys):
        rc = run("build-dataset", "--root", str(tmp_path / "nope"), "--out",
                 str(tmp_path / "m.json"))
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestConfigFile:
    def test_empty_config_yields_paper_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{}")
        cfg = config_file(str(p))

        class Args:
            epochs = batch = lr = momentum = patience = min_delta = metric = None
            augment = None
            no_flip = False
            seed = None

        config, _, _ = resolve_train_config(Args(), cfg)
        assert config.max_epochs == 50
        assert config.batch_size == 64
        assert config.learning_rate == 0.001

    def test_cli_beats_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"learning_rate": 0.01}))

        class Args:
            epochs = batch = momentum = patience = min_delta = metric = None
            lr = 0.1
            augment = None
            no_flip = False
            seed = None

        config, _, _ = resolve_train_config(Args(), config_file(str(p)))
        assert config.learning_rate == 0.1

    def test_misspelled_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"learnig_rate": 0.01}))
        with pytest.raises(UserError, match="learnig_rate"):
            config_file(str(p))

    def test_nested_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"early_stopping": {"patince": 3}}))
        with pytest.raises(UserError, match="patince"):
            config_file(str(p))


class TestVerbs:
    def test_extract_frames_counts(self, tmp_path, capsys):
        src = tmp_path / "frames"
        src.mkdir()
        rng = np.random.default_rng(0)
        for i in range(9):
            Image.fromarray(rng.integers(0, 256, (8, 8, 3), np.uint8)).save(
                src / f"f_{i:03d}.png")
        out = tmp_path / "out"
        assert run("extract-frames", "--in", str(src), "--stride", "2",
                   "--out", str(out)) == 0
        assert len(list(out.glob("*.png"))) == 5  # ceil(9/2)

    def test_synth_build_train_evaluate_predict(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert run("synth-shapes", "--out", str(data), "--n", "12", "--size", "32",
                   "--seed", "3") == 0
        assert (data / "manifest.json").exists()

        rundir = tmp_path / "run"
        assert run("train", "--model", "mini-vgg", "--data", str(data / "manifest.json"),
                   "--out", str(rundir), "--epochs", "1", "--batch", "16",
                   "--no-augment") == 0
        assert (rundir / "model.sgnf").exists()
        resolved = json.loads((rundir / "config.json").read_text())
        assert resolved["train"]["max_epochs"] == 1
        assert resolved["augment"] is None

        assert run("evaluate", "--model", str(rundir / "model.sgnf"),
                   "--data", str(data / "manifest.json")) == 0
        out = capsys.readouterr().out
        assert "accuracy" in out

        image = next((data / "A").glob("*.png"))
        assert run("predict", "--model", str(rundir / "model.sgnf"),
                   "--image", str(image)) == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        label, prob = line.split()
        assert label in ("A", "B", "C")
        assert 0.0 <= float(prob) <= 1.0

    def test_compare_writes_table1_schema(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_shapes(str(data), n_per_class=10, size=32, seed=1)
        out = tmp_path / "comparison.csv"
        assert run("compare", "--models", "mini-vgg,mini-xception",
                   "--data", str(data / "manifest.json"), "--out", str(out),
                   "--epochs", "1", "--batch", "16", "--no-augment") == 0
        header = out.read_text().splitlines()[0]
        assert header.split(",") == ["Model Name", "Epochs Executed", "Train Accuracy",
                                     "Train Loss", "Validation Accuracy",
                                     "Validation Loss", "Time Train", "Time Execution"]
        assert out.with_suffix(".txt").exists()

    def test_report_histogram(self, tmp_path, capsys):
        data = tmp_path / "data"
        synth_shapes(str(data), n_per_class=6, size=32, seed=2)
        csv_out = tmp_path / "hist.csv"
        assert run("report", "--data", str(data / "manifest.json"),
                   "--out", str(csv_out)) == 0
        assert csv_out.read_text().startswith("label,count")
        assert "imbalance ratio" in capsys.readouterr().out

    def test_report_comparison_rerender(self, tmp_path, capsys):
        csv_path = tmp_path / "comparison.csv"
        csv_path.write_text(
            "Model Name,Epochs Executed,Train Accuracy,Train Loss,"
            "Validation Accuracy,Validation Loss,Time Train,Time Execution\n"
            "DenseNet201,47,0.9998,0.0483,0.8042,1.2051,3h 44m,37ms\n"
            "VGG16,30,0.9993,0.1762,0.6889,2.2666,1h 42m,25ms\n")
        assert run("report", "--comparison", str(csv_path)) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[2].startswith("DenseNet201")

    def test_report_without_inputs_is_user_error(self):
        assert run("report") == 1

    def test_predict_bad_weights_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.sgnf"
        bad.write_bytes(b"garbage")
        img = tmp_path / "x.png"
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(img)
        assert run("predict", "--model", str(bad), "--image", str(img)) == 1
