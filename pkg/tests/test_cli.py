import json
import os

import pytest

from pulsemag.cli import EXIT_CONFIG, EXIT_ENCODER, EXIT_OK, main, parse_config, run_lock
from pulsemag.errors import ConfigError, PulseMagError


class TestParseConfig:
    def test_empty_file_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("")
        cfg = parse_config(p)
        t = cfg.train()
        assert (t.lam, t.lr, t.window, t.overlap) == (0.01, 1e-4, 300, 10)
        assert (cfg.grid().lo, cfg.grid().hi) == (0.66, 3.0)

    def test_same_file_same_hash(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 3}, "seed": 4}))
        assert parse_config(p).config_hash == parse_config(p).config_hash
        assert parse_config(p).config_hash != parse_config().config_hash

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 3, "lam": 0.5}}))
        cfg = parse_config(p, [("train.epochs", 7)])
        assert cfg["train"]["epochs"] == 7 and cfg["train"]["lam"] == 0.5

    @pytest.mark.parametrize("doc,key", [({"nope": 1}, "nope"), ({"train": {"lrr": 1}}, "train.lrr"),
                                          ({"train": {"epochs": "x"}}, "train.epochs"), ({"crf": 60}, "crf"),
                                          ({"models": {"tdm": {"depth": 3}}}, "models")])
    def test_rejections(self, tmp_path, doc, key):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            parse_config(p)

    def test_int_promoted_to_float(self):
        assert parse_config(None, [("train.lr", 1)]).train().lr == 1.0


class TestCommands:
    def test_crf_out_of_range_exit2(self, tmp_path, capsys):
        assert main(["compress", "--runs-dir", str(tmp_path), "--crf", "60"]) == EXIT_CONFIG
        assert "crf" in capsys.readouterr().err

    def test_stage2_without_theta_exit2(self, tmp_path, capsys):
        assert main(["train-stage2", "--runs-dir", str(tmp_path), "--data", "x"]) == EXIT_CONFIG
        assert "--theta" in capsys.readouterr().err

    def test_unknown_set_key(self, tmp_path, capsys):
        assert main(["eval", "--runs-dir", str(tmp_path), "--set", "train.bogus=1"]) == EXIT_CONFIG
        assert "train.bogus" in capsys.readouterr().err

    def test_missing_encoder_exit3(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("PMAG_FFMPEG", str(tmp_path / "missing-ffmpeg"))
        assert main(["synth", "--runs-dir", str(tmp_path), "--set", "synth.n_train=1", "--set", "synth.n_val=1",
                     "--set", "synth.H=32", "--set", "synth.W=32"]) == EXIT_OK
        data = str(tmp_path / "default" / "data" / "train" / "manifest.json")
        assert main(["compress", "--runs-dir", str(tmp_path), "--crf", "30", "--data", data]) == EXIT_ENCODER
        assert "PMAG_FFMPEG" in capsys.readouterr().err

    def test_missing_input_exit1(self, tmp_path, capsys):
        assert main(["train-stage1", "--runs-dir", str(tmp_path), "--data", str(tmp_path / "none.json")]) == 1
        assert "none.json" in capsys.readouterr().err

    def test_lock(self, tmp_path):
        with run_lock(tmp_path / "r"):
            with pytest.raises(PulseMagError, match="locked"):
                with run_lock(tmp_path / "r"):
                    pass
        assert not (tmp_path / "r" / ".lock").exists()

    def test_stale_lock_taken_over(self, tmp_path):
        (tmp_path / "r").mkdir()
        (tmp_path / "r" / ".lock").write_text("999999999")
        with run_lock(tmp_path / "r"):
            assert (tmp_path / "r" / ".lock").read_text() == str(os.getpid())


def test_smoke_pipeline(tmp_path):
    """synth -> train-stage1 -> eval -> compress/train-stage2 -> visualize, with provenance files."""
    common = ["--runs-dir", str(tmp_path), "--name", "smoke"]
    small = ["--set", "synth.n_train=2", "--set", "synth.n_val=1", "--set", "synth.H=32", "--set", "synth.W=32",
             "--set", 'models.tdm={"size": 32}', "--set", 'models.psmn={"widths": [4, 8, 8]}']
    assert main(["synth", *common, *small]) == EXIT_OK
    run = tmp_path / "smoke"
    data, val = str(run / "data/train/manifest.json"), str(run / "data/val/manifest.json")
    assert main(["train-stage1", *common, *small, "--epochs", "1", "--data", data, "--val-data", val]) == EXIT_OK
    theta = str(run / "checkpoints/stage1.ckpt")
    assert main(["eval", *common, *small, "--theta", theta, "--val-data", val]) == EXIT_OK
    summary = json.loads((run / "reports/summary.json").read_text())
    assert summary["n"] == 1 and summary["config_hash"] == (run / "config_hash").read_text().strip()
    assert main(["compress", *common, *small, "--crf", "30", "--data", data, "--val-data", val]) == EXIT_OK
    cdata = str(run / "data/train_crf30/manifest.json")
    assert main(["train-stage2", *common, *small, "--epochs", "1", "--data", cdata, "--theta", theta]) == EXIT_OK
    psi = str(run / "checkpoints/stage2.ckpt")
    assert main(["visualize", *common, *small, "--theta", theta, "--psi", psi, "--val-data", val]) == EXIT_OK
    for f in ("resolved_config.json", "config_hash", "versions.json", "plots/pixel_activity.png", "plots/signals.png",
              "reports/history.csv"):
        assert (run / f).exists(), f
    assert json.loads((run / "versions.json").read_text())["encoder"].startswith("ffmpeg")
