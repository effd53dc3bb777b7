import csv
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fsseg.cli import OUTPUT_ROOT_ENV, main, palette

ROOT = Path(__file__).resolve().parents[1]
QUICKSTART = ROOT / "configs" / "quickstart.toml"

TINY = """
method = "{method}"
folds = [0]
shots = [1]
seeds = [0]
[dataset]
source = "synthetic"
images = 48
size = [32, 32]
seed = 3
[stage1]
epochs = 1
[stage2]
epochs = 2
eval_every = 1
"""


@pytest.fixture
def tiny(tmp_path):
    def make(method="vanilla", extra=""):
        path = tmp_path / f"{method}.toml"
        path.write_text(TINY.format(method=method) + extra)
        return path

    return make


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.mark.slow
def test_quickstart(tmp_path):
    assert main(["run", str(QUICKSTART), "--output", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "summary.csv")
    assert [r["shots"] for r in rows] == ["1", "5"]
    assert all(0 <= float(r["total_miou"]) <= 1 for r in rows)


def test_env_output_root(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert main(["run", str(tiny())]) == 0
    assert (tmp_path / "env" / "summary.csv").is_file()


def test_unknown_method_names_line(tiny, capsys):
    path = tiny(method="does_not_exist")
    assert main(["run", str(path)]) == 2
    err = capsys.readouterr().err
    assert "does_not_exist" in err and f"{path}:2:" in err


def test_unknown_key_names_line(tiny, capsys):
    path = tiny(extra="[stage2]\n")  # duplicate table is a parse error
    assert main(["run", str(path)]) == 2
    path.write_text(TINY.format(method="vanilla").replace("eval_every = 1", "eval_every = 1\nwarmup = 3"))
    assert main(["run", str(path)]) == 2
    assert f"{path}:16:" in capsys.readouterr().err


def test_missing_config_is_runtime_error(tmp_path):
    assert main(["run", str(tmp_path / "nope.toml")]) in (1, 2)


def test_bad_command():
    assert main(["frobnicate"]) == 2


def test_rerun_byte_identical(tiny, tmp_path):
    path = tiny()
    for name in ("a", "b"):
        assert main(["run", str(path), "--output", str(tmp_path / name)]) == 0
    for f in ("summary.csv", "runs.csv", "folds.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestSweep:
    def test_lr(self, tiny, tmp_path):
        assert main(["sweep", str(tiny()), "--axis", "lr", "--values", "0.001,0.01,0.1", "--output", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "sweep_lr" / "sweep.csv")
        assert [r["lr"] for r in rows] == ["0.001", "0.01", "0.1"]

    def test_lambda_grid(self, tiny, tmp_path):
        values = "0:0,0.5:1,1:1"
        assert main(["sweep", str(tiny("triplet_all")), "--axis", "lambda_triplet", "--values", values, "--output", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "sweep_lambda_triplet" / "sweep.csv")
        assert [(r["lambda_bt"], r["lambda_ft"]) for r in rows] == [("0.0", "0.0"), ("0.5", "1.0"), ("1.0", "1.0")]

    def test_ratio_shift(self, tiny, tmp_path):
        # twelve classes give three novel classes per fold, so a shift of two in either direction is legal
        path = tiny()
        path.write_text(path.read_text().replace('seed = 3', 'seed = 3\nnum_classes = 12'))
        assert main(["sweep", str(path), "--axis", "ratio_shift", "--values=-2,0,2", "--output", str(tmp_path)]) == 0
        assert [r["ratio_shift"] for r in _rows(tmp_path / "sweep_ratio_shift" / "sweep.csv")] == ["-2", "0", "2"]
        shifted = json.loads((tmp_path / "sweep_ratio_shift" / "2" / "vanilla" / "0" / "1" / "0" / "report.json").read_text())
        assert {"1", "2", "3", "4", "5"} <= set(shifted["per_class_iou"])

    def test_bad_values(self, tiny, tmp_path):
        assert main(["sweep", str(tiny()), "--axis", "lr", "--values", "fast", "--output", str(tmp_path)]) == 2


class TestExportAndReport:
    @pytest.fixture
    def run(self, tiny, tmp_path):
        path = tiny()
        out = tmp_path / "run"
        assert main(["run", str(path), "--output", str(out)]) == 0
        return path, out

    def test_export_masks(self, run, tmp_path):
        cfg, out = run
        ckpt = out / "vanilla" / "0" / "1" / "0" / "model.pt"
        for name in ("m1", "m2"):
            assert main(["export-masks", str(ckpt), str(tmp_path / name), "--config", str(cfg), "--limit", "3"]) == 0
        files = sorted((tmp_path / "m1").glob("*.png"))
        assert len(files) == 3
        for f in files:
            assert f.read_bytes() == (tmp_path / "m2" / f.name).read_bytes()
            im = Image.open(f)
            assert im.mode == "P" and im.getpalette()[: 3 * 256] == palette()
            values = set(np.unique(np.asarray(im)))
            assert values <= set(range(9)) | {255}

    def test_export_needs_images(self, run, tmp_path):
        _, out = run
        ckpt = out / "vanilla" / "0" / "1" / "0" / "model.pt"
        assert main(["export-masks", str(ckpt), str(tmp_path / "m")]) == 2

    def test_report_matches_json(self, run):
        _, out = run
        assert main(["report", str(out)]) == 0
        rows = _rows(out / "report.csv")
        mine = [r for r in rows if r["source"] == "run"]
        saved = json.loads((out / "vanilla" / "0" / "1" / "0" / "report.json").read_text())
        assert float(mine[0]["total_miou"]) == saved["total_miou"]
        refs = [r for r in rows if r["source"] == "from paper"]
        assert refs and refs[0]["base_miou"] == "65.48%"
        assert "from paper" in (out / "report.md").read_text()

    def test_report_empty_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["report", str(tmp_path / "empty")]) == 2
