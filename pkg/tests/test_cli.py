"""
End-to-end tests for the command-line subcommands on tiny synthetic data
"""

import csv
import json
import logging
import re

import pytest
from PIL import Image

from config.settings import Settings
from pidcount.cli import run
from pidcount.metrics import METRIC_FIELDS

COUNT_LINE = re.compile(r"^(synth_\d{4}),(\d+)$")


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()


def _synth(out, *extra):
    return run(["synth", "--n", "10", "--size", "32", "--counts", "1:3", "--seed", "4", "--out", str(out), *extra])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic dataset with a split, a one-epoch model and its evaluation"""
    root = tmp_path_factory.mktemp("cli")
    data, model_dir, eval_dir = root / "data", root / "model", root / "eval"
    assert _synth(data, "--split", "3:1:1") == 0
    assert run(["train", "--data", str(data), "--out", str(model_dir), "--width", "4", "--epochs", "1",
                "--batch-size", "3", "--seed", "1"]) == 0
    assert run(["eval", "--ckpt", str(model_dir / Settings.CHECKPOINT_FILENAME), "--data", str(data / "test"),
                "--out", str(eval_dir)]) == 0
    for handler in list(logging.getLogger().handlers):
        logging.getLogger().removeHandler(handler)
        handler.close()
    return {"data": data, "model": model_dir, "eval": eval_dir}


class TestSynth:
    def test_same_arguments_same_bytes(self, tmp_path):
        assert _synth(tmp_path / "a") == 0
        assert _synth(tmp_path / "b") == 0
        for sub in ("images", "masks"):
            names = sorted(p.name for p in (tmp_path / "a" / sub).iterdir())
            assert len(names) == 10
            assert names == sorted(p.name for p in (tmp_path / "b" / sub).iterdir())
            for name in names:
                assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()
        assert (tmp_path / "a" / "counts.csv").read_bytes() == (tmp_path / "b" / "counts.csv").read_bytes()

    def test_split_output(self, workspace):
        data = workspace["data"]
        sizes = {name: len(list((data / name / "images").iterdir())) for name in ("train", "val", "test")}
        assert sizes == {"train": 6, "val": 2, "test": 2}
        with open(data / Settings.SPLIT_FILENAME, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 10
        assert {r["split"] for r in rows} == {"train", "val", "test"}

    def test_config_file_size_is_kept(self, tmp_path):
        config = tmp_path / "synth.cfg"
        config.write_text("image_size = 64\nn_images = 2\ncounts = 1:2\n")
        assert run(["synth", "--config", str(config), "--out", str(tmp_path / "ds")]) == 0
        images = sorted((tmp_path / "ds" / "images").glob("*.png"))
        assert len(images) == 2
        for path in images:
            with Image.open(path) as image:
                assert image.size == (64, 64)

    def test_default_size_without_flag_or_file(self, tmp_path):
        assert run(["synth", "--n", "1", "--counts", "1:2", "--out", str(tmp_path / "ds")]) == 0
        (path,) = (tmp_path / "ds" / "images").glob("*.png")
        with Image.open(path) as image:
            assert image.size == (32, 32)

    @pytest.mark.parametrize("policy, test_size", [("paper", 16), ("all", 16), ("default", 2)])
    def test_augment_policies(self, workspace, tmp_path, policy, test_size):
        out = tmp_path / "aug"
        code = run(["augment", "--data", str(workspace["data"]), "--split", "3:1:1", "--policy", policy,
                    "--out", str(out)])
        assert code == 0
        assert len(list((out / "test" / "images").iterdir())) == test_size

    def test_resolved_config_written(self, workspace):
        text = (workspace["data"] / Settings.RESOLVED_CONFIG_FILENAME).read_text()
        assert "command = synth" in text and "split = 3:1:1" in text


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert run(["paint"]) == 1

    def test_missing_required_flag(self):
        assert run(["train", "--data", "x"]) == 1

    def test_missing_dataset(self, tmp_path):
        assert run(["baseline", "--method", "otsu", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run(["count", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 2

    def test_bad_config_file(self, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("lr = banana\n")
        assert run(["synth", "--config", str(config), "--out", str(tmp_path / "o")]) == 1

    def test_bad_size(self, tmp_path):
        assert run(["synth", "--size", "40", "--out", str(tmp_path / "o")]) == 1

    def test_report_needs_inputs(self, tmp_path):
        assert run(["report", "--out", str(tmp_path / "r")]) == 1


class TestTrainAndEval:
    def test_training_outputs(self, workspace):
        model = workspace["model"]
        for name in (Settings.CHECKPOINT_FILENAME, Settings.CURVES_FILENAME, Settings.RESOLVED_CONFIG_FILENAME):
            assert (model / name).is_file()
        assert len((model / Settings.CURVES_FILENAME).read_text().splitlines()) == 2

    def test_metrics_json(self, workspace):
        payload = json.loads((workspace["eval"] / Settings.METRICS_JSON_FILENAME).read_text())
        assert set(METRIC_FIELDS) <= set(payload)
        assert payload["method"] == "pidnet" and payload["n_images"] == 2

    def test_masks_and_labels(self, workspace):
        for sub in ("pred_masks", "labels"):
            assert len(list((workspace["eval"] / sub).glob("*.png"))) == 2

    def test_count_prints_csv(self, workspace, capsys, tmp_path):
        code = run(["count", "--ckpt", str(workspace["model"] / Settings.CHECKPOINT_FILENAME),
                    "--data", str(workspace["data"] / "val"), "--out", str(tmp_path)])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert "id,count" in lines
        counted = [COUNT_LINE.match(line) for line in lines]
        assert len([m for m in counted if m]) == 2
        assert (tmp_path / Settings.COUNTS_FILENAME).read_text().splitlines()[0] == "id,count"


class TestBaselineAndReport:
    def test_baseline_then_report(self, workspace, tmp_path):
        baseline_dir, report_dir = tmp_path / "otsu", tmp_path / "report"
        test_data = workspace["data"] / "test"
        assert run(["baseline", "--method", "otsu", "--data", str(test_data), "--out", str(baseline_dir)]) == 0
        payload = json.loads((baseline_dir / Settings.METRICS_JSON_FILENAME).read_text())
        assert payload["method"] == "otsu"

        code = run([
            "report", "--out", str(report_dir),
            "--curves", str(workspace["model"] / Settings.CURVES_FILENAME),
            "--eval", str(workspace["eval"]), "--data", str(test_data),
            "--compare", str(workspace["eval"]), str(baseline_dir),
        ])
        assert code == 0
        assert (report_dir / "curves.png").is_file()
        assert len(list((report_dir / "overlays").glob("*.png"))) == 2
        with open(report_dir / f"{Settings.COMPARISON_FILENAME}.csv", newline="") as handle:
            assert [r["method"] for r in csv.DictReader(handle)] == ["pidnet", "otsu"]

    def test_report_without_predictions(self, workspace, tmp_path):
        code = run(["report", "--out", str(tmp_path / "r"), "--eval", str(tmp_path), "--data",
                    str(workspace["data"] / "test")])
        assert code == 2
