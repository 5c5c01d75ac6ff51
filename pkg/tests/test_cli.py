"""CLI surface: argument wiring, config files, artifact emission."""

import json

import numpy as np
import pytest

from swycc.cli import main
from swycc.config import ConfigError, build_configs, parse_config_text
from swycc.data import load_dataset
from swycc.ppm import read_ppm
from swycc.sweeps import read_metrics_csv


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.swyc"
    assert run_cli("gen-data", "--out", path, "--n", 60, "--size", 16,
                   "--seed", 3) == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_path):
    out = tmp_path_factory.mktemp("run")
    code = run_cli("train", "--out", out, "--data", dataset_path,
                   "--steps", 30, "--warmup", 5, "--batch", 4, "--seed", 1,
                   "--config", _small_cfg(tmp_path_factory), "--quiet")
    assert code == 0
    return out / "ckpt_30.swyc"


def _small_cfg(tmp_path_factory) -> str:
    cfg = tmp_path_factory.mktemp("cfg") / "small.cfg"
    cfg.write_text(
        "# tiny architecture for CLI tests\n"
        "encoder.base_channels = 8\n"
        "encoder.latent_channels = 4\n"
        "encoder.channel_multipliers = [1, 1, 2, 2]\n"
        "unet.base_channels = 8\n"
        "unet.channel_multiplier = [1, 2]\n"
        "unet.num_res_blocks = [1, 1]\n"
        "unet.downsampling_factor = [1, 2]\n"
        "unet.attn_resolutions = [8]\n"
        "unet.time_dim = 16\n")
    return str(cfg)


class TestConfigParsing:
    def test_key_value_form(self):
        doc = parse_config_text("train.total_steps = 100\n"
                                "loss.lambda_p = 0.2  # comment\n"
                                "unet.channel_multiplier = [1, 2]\n")
        assert doc == {"train": {"total_steps": 100},
                       "loss": {"lambda_p": 0.2},
                       "unet": {"channel_multiplier": [1, 2]}}

    def test_json_form(self):
        doc = parse_config_text(json.dumps({"train": {"batch_size": 4}}))
        enc, unet, train = build_configs(doc)
        assert train.batch_size == 4

    def test_bad_line_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("not a key value pair\n")

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            build_configs({"train": {"nonsense": 1}})

    def test_configs_from_doc(self):
        enc, unet, train = build_configs(
            {"encoder": {"base_channels": 8, "channel_multipliers": [1, 1, 1, 1]},
             "loss": {"lambda_p": 0.3}})
        assert enc.base_channels == 8
        assert train.loss.lambda_p == 0.3


class TestCommands:
    def test_gen_data_dumps_previews(self, tmp_path):
        out = tmp_path / "ds.swyc"
        ppm_dir = tmp_path / "previews"
        assert run_cli("gen-data", "--out", out, "--n", 6, "--seed", 0,
                       "--ppm-dir", ppm_dir) == 0
        ds = load_dataset(out)
        assert len(ds) == 6
        previews = sorted(ppm_dir.glob("*.ppm"))
        assert len(previews) == 6
        img = read_ppm(previews[0])
        assert img.shape == (16, 16, 3)

    def test_train_emits_metrics_and_checkpoint(self, trained):
        run_dir = trained.parent
        assert trained.exists()
        rows = read_metrics_csv(run_dir / "metrics.csv")
        assert len(rows) > 0

    def test_reconstruct(self, trained, dataset_path, tmp_path):
        out = tmp_path / "recon"
        assert run_cli("reconstruct", "--ckpt", trained, "--data", dataset_path,
                       "--out", out, "--steps", 3, "--num-samples", 2) == 0
        pairs = sorted(out.glob("pair_*.ppm"))
        assert len(pairs) == 2

    def test_variance_map(self, trained, dataset_path, tmp_path):
        out = tmp_path / "vmap.ppm"
        assert run_cli("variance-map", "--ckpt", trained, "--data", dataset_path,
                       "--out", out, "--n", 3, "--steps", 2) == 0
        assert read_ppm(out).shape == (16, 16, 3)

    def test_sweep_steps(self, trained, dataset_path, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep-steps", "--ckpt", trained, "--data", dataset_path,
                       "--out", out, "--steps-list", "2,5") == 0
        rows = read_metrics_csv(out / "metrics.csv")
        assert [r["steps"] for r in rows] == ["2", "5"]
        assert all(r["status"] == "ok" for r in rows)
        assert (out / "recon_steps2.ppm").exists()

    def test_sweep_cfg(self, trained, dataset_path, tmp_path):
        out = tmp_path / "sweepcfg"
        assert run_cli("sweep-cfg", "--ckpt", trained, "--data", dataset_path,
                       "--out", out, "--scales", "0,0.5", "--steps", 2) == 0
        rows = read_metrics_csv(out / "metrics.csv")
        assert [r["cfg_scale"] for r in rows] == ["0.0", "0.5"]

    def test_latents_pipeline(self, trained, dataset_path, tmp_path):
        lat = tmp_path / "lat.swyc"
        prior = tmp_path / "prior.swyc"
        gen_dir = tmp_path / "gen"
        assert run_cli("latents", "build", "--ae-ckpt", trained,
                       "--data", dataset_path, "--out", lat) == 0
        assert run_cli("latents", "train", "--latents", lat, "--out", prior,
                       "--steps", 30, "--batch", 8, "--hidden", 8,
                       "--blocks", 1) == 0
        assert run_cli("latents", "generate", "--prior-ckpt", prior,
                       "--ae-ckpt", trained, "--class-id", 1, "--n", 2,
                       "--steps", 3, "--refine-steps", 3, "--out", gen_dir) == 0
        assert len(list(gen_dir.glob("gen_c1_*.ppm"))) == 2

    def test_oracle_check_passes(self, capsys):
        assert run_cli("oracle-check", "--steps", 100, "--n", 1000) == 0
        assert "PASS" in capsys.readouterr().out

    def test_grad_check_quick(self, capsys):
        assert run_cli("grad-check", "--samples", 25, "--size", 8) == 0
        assert "PASS" in capsys.readouterr().out
