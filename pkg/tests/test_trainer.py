"""Training loop contracts: LR schedule, freeze partitions, alternation,
determinism/resume, rejection of non-finite steps, metrics emission."""

import csv
import hashlib

import numpy as np
import pytest

from swycc.data import DatasetSpec, generate_dataset
from swycc.losses import LossConfig
from swycc.models import (EncoderConfig, UNetConfig, build_bundle,
                          param_fingerprint)
from swycc.rng import PrngState
from swycc.trainer import (TrainConfig, TrainState, fit, load_checkpoint,
                           lr_at, make_stores, save_checkpoint,
                           train_step_gan, train_step_swycc)

ENC = EncoderConfig(base_channels=8, latent_channels=4,
                    channel_multipliers=(1, 1, 2, 2))
UNET = UNetConfig(base_channels=8, channel_multiplier=(1, 2),
                  num_res_blocks=(1, 1), downsampling_factor=(1, 2),
                  attn_resolutions=(8,), time_dim=16)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DatasetSpec(size=16), seed=1, n=48)


def quick_cfg(**kw) -> TrainConfig:
    base = dict(total_steps=40, warmup_steps=10, batch_size=8, seed=2,
                checkpoint_every=20, metrics_every=10)
    base.update(kw)
    return TrainConfig(**base)


class TestLrSchedule:
    CFG = TrainConfig(total_steps=1000, warmup_steps=100, peak_lr=1e-4)

    def test_step_zero_is_zero(self):
        assert lr_at(0, self.CFG) == 0.0

    def test_warmup_end_is_peak(self):
        assert lr_at(100, self.CFG) == pytest.approx(1e-4, abs=0.0)

    def test_final_step_is_zero(self):
        assert abs(lr_at(1000, self.CFG)) < 1e-12

    def test_linear_during_warmup(self):
        assert lr_at(50, self.CFG) == pytest.approx(5e-5)

    def test_monotone_decay_after_warmup(self):
        vals = [lr_at(s, self.CFG) for s in range(100, 1001, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(1001, self.CFG)


class TestSwyccStep:
    def test_updates_trainable_but_not_frozen(self, dataset):
        bundle = build_bundle(ENC, UNET, seed=3)
        state = TrainState(0, make_stores(bundle, "swycc"), PrngState(4))
        fp_before = {p: param_fingerprint(bundle.params, (p,))
                     for p in ("encoder/", "d_initial/", "d_refine/", "f_frozen/")}
        train_step_swycc(dataset.images[:8], state, bundle, quick_cfg())
        fp_after = {p: param_fingerprint(bundle.params, (p,))
                    for p in ("encoder/", "d_initial/", "d_refine/", "f_frozen/")}
        assert fp_after["f_frozen/"] == fp_before["f_frozen/"]
        for p in ("encoder/", "d_initial/", "d_refine/"):
            assert fp_after[p] != fp_before[p], f"{p} was not updated"

    def test_identical_seeds_identical_loss_stream(self, dataset):
        def run():
            bundle = build_bundle(ENC, UNET, seed=5)
            state = TrainState(0, make_stores(bundle, "swycc"), PrngState(6))
            cfg = quick_cfg(total_steps=6, warmup_steps=2)
            return [train_step_swycc(dataset.images[:8], state, bundle, cfg).total
                    for _ in range(6)]

        assert run() == run()

    def test_nonfinite_batch_rejected_params_unchanged(self, dataset):
        bundle = build_bundle(ENC, UNET, seed=7)
        state = TrainState(0, make_stores(bundle, "swycc"), PrngState(8))
        bad = dataset.images[:8].copy()
        bad[0, 0, 0, 0] = np.nan
        fp = param_fingerprint(bundle.params)
        bd = train_step_swycc(bad, state, bundle, quick_cfg())
        assert np.isnan(bd.total)
        assert state.incidents == 1
        assert param_fingerprint(bundle.params) == fp

    def test_clip_postcondition_reported(self, dataset):
        bundle = build_bundle(ENC, UNET, seed=9)
        state = TrainState(0, make_stores(bundle, "swycc"), PrngState(10))
        cfg = quick_cfg(warmup_steps=1, total_steps=5)
        bd = train_step_swycc(dataset.images[:8], state, bundle, cfg)
        assert bd.grad_norm <= cfg.clip_norm + 1e-6


class TestGanStep:
    def test_alternation_partition(self, dataset):
        bundle = build_bundle(ENC, UNET, seed=11, with_discriminator=True)
        state = TrainState(0, make_stores(bundle, "gan"), PrngState(12))
        cfg = quick_cfg(mode="gan",
                        loss=LossConfig(adversarial_weight=0.1, adversarial_delay=0))
        fp_frozen = param_fingerprint(bundle.params, ("f_frozen/",))
        fp_refine = param_fingerprint(bundle.params, ("d_refine/",))
        fp_disc = param_fingerprint(bundle.params, ("disc/",))
        fp_gen = param_fingerprint(bundle.params, ("encoder/", "d_initial/"))
        train_step_gan(dataset.images[:8], state, bundle, cfg)
        assert param_fingerprint(bundle.params, ("f_frozen/",)) == fp_frozen
        assert param_fingerprint(bundle.params, ("d_refine/",)) == fp_refine
        assert param_fingerprint(bundle.params, ("disc/",)) != fp_disc
        assert param_fingerprint(bundle.params, ("encoder/", "d_initial/")) != fp_gen

    def test_adv_weight_zero_is_pure_autoencoder_update(self, dataset):
        # identical generator updates with adv_weight 0 regardless of disc state
        def gen_fp(disc_seed):
            bundle = build_bundle(ENC, UNET, seed=13, with_discriminator=True)
            if disc_seed:  # perturb discriminator params only
                prng = PrngState(disc_seed)
                for k, t in bundle.params.items():
                    if k.startswith("disc/"):
                        t.data = t.data + prng.normal(t.shape, dtype=np.float32) * 0.1
            state = TrainState(0, make_stores(bundle, "gan"), PrngState(14))
            cfg = quick_cfg(mode="gan", loss=LossConfig(adversarial_weight=0.0))
            train_step_gan(dataset.images[:8], state, bundle, cfg)
            return param_fingerprint(bundle.params, ("encoder/", "d_initial/"))

        assert gen_fp(0) == gen_fp(99)

    def test_smoke_run_mse_decreases(self, dataset):
        # 500-step smoke run: reconstruction MSE EMA at the end is below
        # its step-50 value
        bundle = build_bundle(ENC, UNET, seed=15, with_discriminator=True)
        state = TrainState(0, make_stores(bundle, "gan"), PrngState(16))
        cfg = quick_cfg(mode="gan", total_steps=500, warmup_steps=20)
        at_50 = None
        for _ in range(500):
            idx = state.prng.integers(len(dataset.images), (8,))
            train_step_gan(dataset.images[idx], state, bundle, cfg)
            if state.step == 50:
                at_50 = state.ema["mse"]
        assert state.ema["mse"] < at_50

    def test_discriminator_separates_real_fake(self, dataset):
        from swycc import tensor as T
        from swycc.tensor import Tensor, no_grad
        bundle = build_bundle(ENC, UNET, seed=17, with_discriminator=True)
        state = TrainState(0, make_stores(bundle, "gan"), PrngState(18))
        cfg = quick_cfg(mode="gan", total_steps=150, warmup_steps=10,
                        loss=LossConfig(adversarial_weight=0.1, adversarial_delay=0))
        for _ in range(150):
            idx = state.prng.integers(len(dataset.images), (8,))
            train_step_gan(dataset.images[idx], state, bundle, cfg)
        held = dataset.images[-8:]
        with no_grad():
            fake = bundle.decode_initial(bundle.encode(Tensor(held))).data
            real_logit = float(bundle.discriminate(Tensor(held)).data.mean())
            fake_logit = float(bundle.discriminate(Tensor(fake)).data.mean())
        assert real_logit > fake_logit


class TestFit:
    def test_smoke_total_ema_decreases(self, dataset):
        # 500-step smoke run: total-loss EMA at step 500 < EMA at step 50
        bundle = build_bundle(ENC, UNET, seed=19)
        state = TrainState(0, make_stores(bundle, "swycc"), PrngState(20))
        cfg = quick_cfg(total_steps=500, warmup_steps=20, seed=20)
        at_50 = None
        for _ in range(500):
            idx = state.prng.integers(len(dataset.images), (8,))
            train_step_swycc(dataset.images[idx], state, bundle, cfg)
            if state.step == 50:
                at_50 = state.ema["total"]
        assert state.step == 500
        assert state.ema["total"] < at_50

    def test_metrics_csv_rows(self, dataset, tmp_path):
        cfg = quick_cfg(total_steps=40, metrics_every=10, checkpoint_every=40)
        fit(dataset.images, cfg, ENC, UNET, out_dir=tmp_path)
        rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
        steps = [int(r["step"]) for r in rows]
        assert steps == [10, 20, 30, 40]
        assert all(b > a for a, b in zip(steps, steps[1:]))

    def test_deterministic_checkpoints(self, dataset, tmp_path):
        cfg = quick_cfg()
        _, _, ck1 = fit(dataset.images, cfg, ENC, UNET, out_dir=tmp_path / "a")
        _, _, ck2 = fit(dataset.images, cfg, ENC, UNET, out_dir=tmp_path / "b")
        assert ck1.read_bytes() == ck2.read_bytes()

    def test_resume_matches_uninterrupted(self, dataset, tmp_path):
        cfg = quick_cfg()
        _, _, full = fit(dataset.images, cfg, ENC, UNET, out_dir=tmp_path / "full")
        _, _, resumed = fit(dataset.images, cfg, ENC, UNET,
                            out_dir=tmp_path / "resumed",
                            resume=tmp_path / "full" / "ckpt_20.swyc")
        assert resumed.read_bytes() == full.read_bytes()

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            fit(np.zeros((0, 16, 16, 3), dtype=np.float32), quick_cfg(), ENC, UNET)


class TestCheckpointStateRoundTrip:
    def test_save_load_save_identical(self, dataset, tmp_path):
        bundle, state, ck = fit(dataset.images, quick_cfg(), ENC, UNET,
                                out_dir=tmp_path)
        b2, s2, meta = load_checkpoint(ck)
        again = tmp_path / "again.swyc"
        save_checkpoint(again, b2, s2, TrainConfig.from_dict(meta["train_config"]))
        assert again.read_bytes() == ck.read_bytes()

    def test_prng_state_preserved(self, dataset, tmp_path):
        bundle, state, ck = fit(dataset.images, quick_cfg(), ENC, UNET,
                                out_dir=tmp_path)
        _, s2, _ = load_checkpoint(ck)
        assert s2.prng.state == state.prng.state
        assert s2.step == state.step
        assert s2.ema == state.ema


class TestConfigValidation:
    def test_warmup_bound(self):
        with pytest.raises(ValueError):
            TrainConfig(total_steps=10, warmup_steps=10)

    def test_mode_checked(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="vae")
