import json

import numpy as np
import pytest

from dualmae.backbone import load_checkpoint
from dualmae.cli import build_parser, main
from dualmae.config import REGISTRY, defaults, dump_config, load_config, parse_text
from dualmae.datakit import read_clip_file, read_manifest
from dualmae.errors import ConfigError

FAST = ["--data.frames", "4", "--data.height", "16", "--data.width", "16", "--per-class", "2", "--batch-size", "4"]


class TestConfig:
    def test_empty_file_is_defaults(self, tmp_path):
        (tmp_path / "c.txt").write_text("# nothing\n\n")
        assert load_config(tmp_path / "c.txt") == defaults()

    def test_defaults(self):
        cfg = defaults()
        assert cfg["loss.tau"] == 0.1 and cfg["tta.steps"] == 20
        assert (cfg["train.beta1"], cfg["train.beta2"]) == (0.9, 0.95)
        assert cfg["mask.video.strategy"] == cfg["mask.image.strategy"] == "random"

    def test_negative_tau_names_key(self, tmp_path):
        (tmp_path / "c.txt").write_text("loss.tau = -1\n")
        with pytest.raises(ConfigError, match="loss.tau") as err:
            load_config(tmp_path / "c.txt")
        assert err.value.key == "loss.tau"

    def test_override_wins(self, tmp_path):
        (tmp_path / "c.txt").write_text("loss.tau = 0.5\nseed = 3\n")
        cfg = load_config(tmp_path / "c.txt", {"loss.tau": "0.2"})
        assert cfg["loss.tau"] == 0.2 and cfg["seed"] == 3

    @pytest.mark.parametrize("text,key", [("nope = 1", "nope"), ("train.steps = many", "train.steps"), ("aug.flip = maybe", "aug.flip"), ("mask.video.strategy = blocks", "mask.video.strategy")])
    def test_bad_values(self, text, key):
        with pytest.raises(ConfigError) as err:
            load_config(overrides=parse_text(text))
        assert err.value.key == key

    def test_dump_load_identity(self, tmp_path):
        cfg = load_config(overrides={"loss.tau": 0.07, "model.dim": 96, "aug.erase": True, "data.manifest": "x.csv"})
        (tmp_path / "c.txt").write_text(dump_config(cfg))
        assert load_config(tmp_path / "c.txt") == cfg

    def test_every_key_reachable_from_flags(self):
        parser = build_parser()
        for key in REGISTRY:
            default = REGISTRY[key].default
            value = "true" if isinstance(default, bool) else "1"
            args = parser.parse_args(["pretrain", f"--{key}", value])
            assert vars(args)[f"cfg:{key}"] == value


class TestCli:
    def test_gen_data_counts(self, tmp_path):
        assert main(["gen-data", "--classes", "4", "--per-class", "32", "--data.frames", "4", "--data.height", "16", "--data.width", "16", "--out", str(tmp_path)], quiet=True) == 0
        rows = read_manifest(tmp_path / "manifest.csv")
        assert len(rows) == 128 and len(list(tmp_path.glob("*.cvmt"))) == 128
        assert read_clip_file(rows[0][0]).shape == (3, 4, 16, 16)

    def test_pretrain_byte_identical_logs(self, tmp_path):
        for run in ("a", "b"):
            assert main(["pretrain", "--steps", "5", "--seed", "0", "--out", str(tmp_path / run), *FAST], quiet=True) == 0
        assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
        assert (tmp_path / "a" / "loss_curve.png").stat().st_size > 0
        assert "train.steps = 5" in (tmp_path / "a" / "config.txt").read_text()

    def test_pipeline_from_manifest(self, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        assert main(["gen-data", "--per-class", "4", "--data.frames", "4", "--data.height", "16", "--data.width", "16", "--out", str(data)], quiet=True) == 0
        manifest = str(data / "manifest.csv")
        assert main(["pretrain", "--steps", "3", "--manifest", manifest, "--batch-size", "4", "--out", str(run), "--no-figure"], quiet=True) == 0
        _, text = load_checkpoint(run / "checkpoint.ckpt")
        assert "data.frames = 4" in text
        ckpt = str(run / "checkpoint.ckpt")
        capsys.readouterr()
        assert main(["probe", "--checkpoint", ckpt, "--manifest", manifest, "--probe.steps", "20"]) == 0
        probe = json.loads(capsys.readouterr().out.strip())
        assert 0 <= probe["top1"] <= 1
        assert main(["retrieve", "--checkpoint", ckpt, "--manifest", manifest]) == 0
        rec = json.loads(capsys.readouterr().out.strip())
        assert rec["r1"] <= rec["r5"]
        assert main(["tta", "--checkpoint", ckpt, "--manifest", manifest, "--tta.steps", "2"]) == 0
        rec = json.loads(capsys.readouterr().out.strip())
        assert np.isfinite(rec["total_after"])
        assert main(["visualize", "--checkpoint", ckpt, "--clip", str(data / "clip_00000.cvmt"), "--out", str(tmp_path / "fig"), "--format", "ppm"]) == 0
        assert (tmp_path / "fig" / "figure_000.ppm").read_bytes().startswith(b"P6\n64 80\n")

    @pytest.mark.parametrize(
        "argv",
        [
            ["frobnicate"],
            ["pretrain", "--no-such-flag", "1"],
            ["pretrain", "--loss.tau", "-1"],
            ["pretrain", "--train.steps", "abc"],
            ["verify", "--criteria", "99"],
        ],
    )
    def test_validation_errors_exit_1(self, argv, capsys):
        assert main(argv) == 1
        assert capsys.readouterr().err

    def test_runtime_errors_exit_2(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage")
        assert main(["probe", "--checkpoint", str(tmp_path / "bad.ckpt")]) == 2
        (tmp_path / "bad.cvmt").write_bytes(b"CVMT\x01")
        assert main(["visualize", "--clip", str(tmp_path / "bad.cvmt"), "--out", str(tmp_path / "o")]) == 2
        assert main(["pretrain", "--steps", "1", "--mask.video.ratio", "1.0", *FAST]) == 2
        assert "error" in capsys.readouterr().err

    def test_verify_subset(self, capsys):
        assert main(["verify", "--criteria", "1,2"]) == 0
        out = capsys.readouterr().out
        assert "PASS criterion  1" in out and "2/2 criteria passed" in out
