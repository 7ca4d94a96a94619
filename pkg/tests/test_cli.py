import json

import numpy as np
import pytest

from conftest import TOY_ENCODER
from s2tpv.cli import main, parse_m_values
from s2tpv.errors import ConfigError
from s2tpv.evaluation import read_pgm, read_prediction

CONFIG = {
    "format": "s2tpv-config", "version": 1,
    "encoder": {**TOY_ENCODER, "bounds": [list(b) for b in TOY_ENCODER["bounds"]]},
    "train": {"steps": 3, "point_budget": 128},
    "render": {"n_scale": 2, "feat_dim": 4, "n_rays": 1024},
    "data": {"kind": "occlusion", "n_scenes": 2, "n_frames": 2, "seed": 40},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(json.dumps(CONFIG))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


class TestParsing:
    @pytest.mark.parametrize("text,expected", [("0..7", list(range(8))), ("0,2,5", [0, 2, 5]), ("3", [3])])
    def test_m_values(self, text, expected):
        assert parse_m_values(text) == expected

    @pytest.mark.parametrize("text", ["", "a..b", "-1,2"])
    def test_bad_m_values(self, text):
        with pytest.raises(ConfigError):
            parse_m_values(text)

    def test_unknown_subcommand(self, capsys):
        assert run("frobnicate") == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run("selftest", "--fast") == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_config_section(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(json.dumps({"optimizer": {}}))
        assert run("--config", path, "--out", tmp_path, "train") == 1

    def test_missing_checkpoint(self, tmp_path):
        assert run("--out", tmp_path, "eval", "--checkpoint", tmp_path / "nope.ckpt") == 1


class TestCommands:
    def test_selftest(self, capsys):
        assert run("selftest") == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_gen_scenes(self, tmp_path):
        assert run("--seed", 3, "--out", tmp_path, "gen-scenes", "--n", 2, "--frames", 3) == 0
        doc = json.loads((tmp_path / "scenes.json").read_text())
        assert doc["format"] == "s2tpv-scenes" and len(doc["scenes"]) == 2

    def test_pipeline_and_determinism(self, tmp_path, config):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("--config", config, "--seed", 7, "--out", out, "train") == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()
        assert (a / "loss.csv").read_text().count("\n") == 4

        for out in (a, b):
            assert run("--config", config, "--out", out, "eval", "--checkpoint", a / "model.ckpt") == 0
        for name in ("report.json", "per_class.csv", "confusion.csv"):
            assert (a / "report" / name).read_bytes() == (b / "report" / name).read_bytes()

        assert run("--config", config, "--out", a, "eval", "--checkpoint", a / "model.ckpt",
                   "--baseline", a / "model.ckpt", "--baseline-m", 0, "--score-empty") == 0
        assert (a / "gain_vs_count.csv").exists()

        assert run("--config", config, "--out", a, "ablate", "--checkpoint", a / "model.ckpt", "--m", "0..1") == 0
        assert len((a / "ablation.csv").read_text().splitlines()) == 3
        # history longer than the two-frame scenes
        assert run("--config", config, "--out", a, "ablate", "--checkpoint", a / "model.ckpt", "--m", "0..7") == 1

        assert run("--config", config, "--out", a / "viz", "viz", "--checkpoint", a / "model.ckpt") == 0
        assert read_pgm(a / "viz" / "tpv_hw.pgm").shape == (4, 4)
        pred, k = read_prediction(a / "viz" / "prediction.bin")
        assert pred.shape == (4, 4, 2) and k == 9

    def test_different_seed_different_checkpoint(self, tmp_path, config):
        for seed in (1, 2):
            assert run("--config", config, "--seed", seed, "--out", tmp_path / str(seed), "train", "--steps", 1) == 0
        assert (tmp_path / "1" / "model.ckpt").read_bytes() != (tmp_path / "2" / "model.ckpt").read_bytes()

    def test_numeric_failure_exit_code(self, tmp_path, config):
        doc = json.loads(open(config).read())
        doc["train"]["lr"] = 1e308
        doc["train"]["clip"] = None
        path = tmp_path / "huge.cfg"
        path.write_text(json.dumps(doc))
        assert run("--config", path, "--out", tmp_path, "train", "--steps", 3) == 2


def test_loss_csv_values_finite(tmp_path, config):
    assert run("--config", config, "--out", tmp_path, "train") == 0
    rows = (tmp_path / "loss.csv").read_text().splitlines()[1:]
    assert np.isfinite([float(r.split(",")[1]) for r in rows]).all()
