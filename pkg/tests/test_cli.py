import csv
import json

import numpy as np
import pytest

from croco.cli import main, read_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "synth"
    assert main(["synth", "--seed", "4", "--size-px", "64", "--min-patch-px", "16", "--n-structures", "4", "--out", str(d)]) == 0
    return d


def test_synth_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "synth", "--seed", 7, "--size-px", 128, "--min-patch-px", 16, "--out", tmp_path / name)
        assert code == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "splits.json" in files and len(files) == 17
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_creates_nested_dir(tmp_path, capsys):
    out = tmp_path / "x" / "y" / "z"
    code, _, _ = run(capsys, "synth", "--size-px", 64, "--min-patch-px", 16, "--out", out)
    assert code == 0 and (out / "splits.json").exists()


def test_synth_invalid_size(tmp_path, capsys):
    code, out, err = run(capsys, "synth", "--size-px", 10, "--out", tmp_path / "s")
    assert code == 1 and "error" in err and out == ""


def test_bad_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--nope"])
    assert exc.value.code == 1


def train_args(dataset_dir, run_dir, *extra):
    return ("train", "--data", dataset_dir, "--run-dir", run_dir, "--batch-size", 4, "--patch-m", 8.0,
            "--stride-m", 4.0, "--init-samples", 16, *extra)


def test_train_one_step(tmp_path, dataset_dir, capsys):
    code, out, _ = run(capsys, *train_args(dataset_dir, tmp_path / "r", "--steps", 1))
    assert code == 0 and out.startswith("steps=1")
    with open(tmp_path / "r" / "reports" / "train_log.csv") as f:
        assert len(list(csv.DictReader(f))) == 1
    for sub in ("checkpoints", "maps", "reports", "figures"):
        assert (tmp_path / "r" / sub).is_dir()


def test_train_batch_size_one(tmp_path, dataset_dir, capsys):
    code, _, err = run(capsys, *train_args(dataset_dir, tmp_path / "r", "--steps", 1), "--batch-size", 1)
    assert code == 1 and "batch_size" in err
    assert not (tmp_path / "r").exists()


def test_override_precedence(tmp_path, dataset_dir, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[train]\ntemperature = 0.5\nsteps = 1\n")
    code, _, _ = run(capsys, *train_args(dataset_dir, tmp_path / "r"), "-c", cfg, "--temperature", 0.1)
    assert code == 0
    resolved = read_config(tmp_path / "r" / "config.resolved")
    assert resolved["train.temperature"] == 0.1
    assert resolved["train.steps"] == 1


def test_bad_config_file(tmp_path, dataset_dir, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[train\nsteps = ")
    code, _, _ = run(capsys, *train_args(dataset_dir, tmp_path / "r"), "-c", cfg)
    assert code == 1


class TestOracleFlow:
    @pytest.fixture
    def built(self, tmp_path, dataset_dir, capsys):
        rgb = dataset_dir / "synth4_r0c0_rgb.raw"
        dem = dataset_dir / "synth4_r0c0_dem.raw"
        fmap = tmp_path / "m.crocomap"
        code, _, _ = run(capsys, "build-map", "--oracle", "--oracle-seed", 4, "--rgb-tile", rgb, "--dem-tile", dem,
                         "--patch-px", 8, "--stride-px", 4, "--out", fmap)
        assert code == 0
        return rgb, dem, fmap

    def test_eval_top1(self, tmp_path, built, capsys):
        rgb, dem, fmap = built
        code, out, _ = run(capsys, "eval", "--oracle", "--oracle-seed", 4, "--rgb-tile", rgb, "--dem-tile", dem,
                           "--map", fmap, "--out", tmp_path / "rep")
        assert code == 0
        fields = dict(kv.split("=") for kv in out.split())
        assert fields["top1"] == "1.00" and fields["top5"] == "1.00"
        assert json.loads((tmp_path / "rep" / "synth4_r0c0_rgb_report.json").read_text())["top1"] == 1.0

    def test_localize_k_lines(self, built, capsys):
        rgb, dem, fmap = built
        code, out, _ = run(capsys, "localize", "--oracle", "--oracle-seed", 4, "--rgb-tile", rgb, "--dem-tile", dem,
                           "--map", fmap, "--cell", 2, 3, "-k", 5)
        lines = out.strip().splitlines()
        assert code == 0 and len(lines) == 5
        assert lines[0].split()[:2] == ["2", "3"]
        scores = [float(line.split()[2]) for line in lines]
        assert scores == sorted(scores, reverse=True)

    def test_cell_outside_map(self, built, capsys):
        rgb, dem, fmap = built
        code, _, _ = run(capsys, "localize", "--oracle", "--oracle-seed", 4, "--rgb-tile", rgb, "--dem-tile", dem,
                         "--map", fmap, "--cell", 99, 0)
        assert code == 1

    def test_heatmap(self, tmp_path, built, capsys):
        rgb, dem, fmap = built
        code, _, _ = run(capsys, "heatmap", "--oracle", "--oracle-seed", 4, "--rgb-tile", rgb, "--dem-tile", dem,
                         "--map", fmap, "--cell", 0, 0, "--out", tmp_path / "h")
        assert code == 0
        grid = np.loadtxt(tmp_path / "h.csv", delimiter=",")
        assert grid.shape == (7, 7) and grid[0, 0] == grid.max()

    def test_missing_map(self, tmp_path, built, capsys):
        rgb, dem, _ = built
        code, _, err = run(capsys, "eval", "--oracle", "--rgb-tile", rgb, "--dem-tile", dem,
                           "--map", tmp_path / "none.crocomap", "--out", tmp_path / "rep")
        assert code == 2 and err


def test_ablate_empty_sweep(tmp_path, capsys):
    sweep = tmp_path / "sweep.json"
    sweep.write_text("{}")
    code, _, err = run(capsys, "ablate", "--sweep", sweep, "--run-dir", tmp_path / "r")
    assert code == 1 and "sweep" in err


def test_ablate_table(tmp_path, capsys):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"batch_size": [4, 8], "seeds": [0, 1]}))
    code, out, _ = run(capsys, "ablate", "--sweep", sweep, "--run-dir", tmp_path / "r", "--steps", 2,
                       "--patch-m", 8.0, "--stride-m", 4.0, "--init-samples", 16,
                       "--scene-size-px", 64, "--scene-min-patch-px", 16, "--scene-n-structures", 4)
    assert code == 0
    with open(tmp_path / "r" / "reports" / "ablation.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["gsd_m", "patch_m", "batch_size", "seed", "top1", "top5"]
    assert len(rows) == 5
    with open(tmp_path / "r" / "reports" / "ablation_summary.csv") as f:
        summary = list(csv.DictReader(f))
    assert [s["batch_size"] for s in summary] == ["4", "8"]
    assert len(out.strip().splitlines()) == 2
