"""End-to-end command-line workflows on miniature configs."""

import json
import os

import numpy as np
import pytest

from sortscan import cli
from sortscan.config import RunConfig, load_config

TINY = [
    "num_classes=2", "channels=8", "blocks=1", "image_size=32", "state_dim=4",
    "iterations=2", "log_every=1", "num_images=4", "instances_min=2",
    "instances_max=3", "prevalence=0.5,0.5", "radius_min=3", "radius_max=5",
    "train_frac=0.5",
]


def run(argv):
    return cli.main(argv)


def tiny_args(extra):
    out = []
    for kv in TINY:
        out += ["--set", kv]
    return out + extra


class TestConfigFile:
    def test_file_plus_overrides(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nchannels = 16\nseed = 3\n")
        cfg = load_config(str(cfg_file), ["seed=9"])
        assert cfg.channels == 16
        assert cfg.seed == 9  # flags win

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("not_a_key = 5\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(str(cfg_file))
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(None, ["bogus=1"])

    def test_type_coercion(self):
        cfg = load_config(None, ["sorting_on=false", "prevalence=0.9,0.1",
                                 "num_classes=2", "lr=0.5"])
        assert cfg.sorting_on is False
        assert cfg.prevalence == (0.9, 0.1)
        assert cfg.lr == 0.5

    def test_hash_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        c = RunConfig(seed=1)
        assert a.hash() == b.hash()
        assert a.hash() != c.hash()


class TestGenData:
    def test_writes_dataset_and_manifest(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path)] + tiny_args([])) == 0
        ds = tmp_path / "dataset"
        manifest = (ds / "manifest.txt").read_text()
        assert "config_sha256=" in manifest
        listed = [l for l in manifest.splitlines() if l and not l.startswith("#")]
        assert len(listed) == 4
        for line in listed:
            for rel in line.split()[1:4]:
                assert (ds / rel).exists()

    def test_regenerate_is_byte_identical(self, tmp_path):
        run(["gen-data", "--out", str(tmp_path / "a")] + tiny_args([]))
        run(["gen-data", "--out", str(tmp_path / "b")] + tiny_args([]))
        for sub in ("manifest.txt", "images/0000.png", "instances/0000.png"):
            fa = (tmp_path / "a" / "dataset" / sub).read_bytes()
            fb = (tmp_path / "b" / "dataset" / sub).read_bytes()
            assert fa == fb, sub


class TestTrainEvalInfer:
    @pytest.fixture
    def dataset(self, tmp_path):
        run(["gen-data", "--out", str(tmp_path)] + tiny_args([]))
        return str(tmp_path / "dataset")

    def test_train_eval_infer_pipeline(self, tmp_path, dataset):
        out = str(tmp_path / "work")
        assert run(["train", "--dataset", dataset, "--out", out] + tiny_args([])) == 0
        ckpt = os.path.join(out, "run", "checkpoint")
        assert os.path.exists(os.path.join(ckpt, "manifest.txt"))

        assert run(["eval", "--dataset", dataset, "--checkpoint", ckpt,
                    "--out", out] + tiny_args([])) == 0
        payload = json.loads(open(os.path.join(out, "metrics.json")).read())
        assert "_provenance" in payload
        assert 0.0 <= payload["aggregate"]["dice"] <= 1.0

        assert run(["infer", "--dataset", dataset, "--checkpoint", ckpt,
                    "--out", out] + tiny_args([])) == 0
        preds = os.listdir(os.path.join(out, "predictions"))
        assert any(p.endswith(".png") for p in preds)

    def test_eval_is_deterministic(self, tmp_path, dataset):
        out = str(tmp_path / "work")
        run(["train", "--dataset", dataset, "--out", out] + tiny_args([]))
        ckpt = os.path.join(out, "run", "checkpoint")
        run(["eval", "--dataset", dataset, "--checkpoint", ckpt, "--out",
             str(tmp_path / "e1")] + tiny_args([]))
        run(["eval", "--dataset", dataset, "--checkpoint", ckpt, "--out",
             str(tmp_path / "e2")] + tiny_args([]))
        a = (tmp_path / "e1" / "metrics.json").read_bytes()
        b = (tmp_path / "e2" / "metrics.json").read_bytes()
        assert a == b

    def test_resume_continues_log(self, tmp_path, dataset):
        out = str(tmp_path / "work")
        run(["train", "--dataset", dataset, "--out", out] + tiny_args([]))
        assert run(["train", "--dataset", dataset, "--out", out, "--resume"]
                   + tiny_args(["--set", "iterations=4"])) == 0
        lines = open(os.path.join(out, "run", "train_log.jsonl")).read().splitlines()
        iters = [json.loads(l)["iteration"] for l in lines if not l.startswith("#")]
        assert iters[-1] == 3


class TestEntropyProbeCmd:
    def test_report_written_with_orderings(self, tmp_path):
        assert run(["entropy-probe", "--out", str(tmp_path)]
                   + tiny_args(["--set", "probe_trials=3", "--set", "probe_tokens=16"])) == 0
        payload = json.loads(open(tmp_path / "entropy_probe.json").read())
        assert payload["trials"] == 3
        assert set(payload["orderings"]) == {"sorted", "random", "raster"}
        assert len(payload["orderings"]["sorted"]["per_trial"]) == 3
        assert "_provenance" in payload


class TestAblateCmd:
    def test_tiny_grid_produces_rows_and_seeds(self, tmp_path):
        args = tiny_args(["--set", "ablate_seeds=2", "--set", "iterations=2",
                          "--set", "prevalence=0.9,0.1"])
        assert run(["ablate-scan", "--out", str(tmp_path), "--grid", "orderings"]
                   + args) == 0
        payload = json.loads(open(tmp_path / "ablation.json").read())
        rows = payload["orderings"]["rows"]
        assert len(rows) == 4  # one per ordering
        for row in rows:
            assert row["seeds"] == [0, 1]
        assert (tmp_path / "ablation_table.txt").exists()


class TestVerifyCmd:
    def test_verify_passes_on_fresh_checkout(self, capsys):
        assert run(["verify"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(l.startswith("PASS gradient-checks") for l in lines)
        assert not any(l.startswith("FAIL") for l in lines)
