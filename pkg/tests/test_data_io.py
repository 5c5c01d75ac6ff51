"""Datasets, image I/O, the checkpoint container, and metrics."""

import math

import numpy as np
import pytest

from swycc.checkpoint import (CheckpointError, read_container, read_meta,
                              write_container)
from swycc.data import (DatasetSpec, generate_dataset, half_flat_half_checker,
                        load_dataset, save_dataset)
from swycc.metrics import feature_mmd, frozen_feature_matrix, mmd_unbiased, psnr
from swycc.ppm import PpmError, montage, read_ppm, write_ppm
from swycc.rng import PrngState

from test_models import tiny_bundle


class TestToyDataset:
    def test_bit_identical_regeneration(self):
        spec = DatasetSpec(size=16)
        a = generate_dataset(spec, seed=3, n=30)
        b = generate_dataset(spec, seed=3, n=30)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        spec = DatasetSpec(size=16)
        a = generate_dataset(spec, seed=3, n=6)
        b = generate_dataset(spec, seed=4, n=6)
        assert not np.array_equal(a.images, b.images)

    def test_pixel_range(self):
        ds = generate_dataset(DatasetSpec(size=16), seed=0, n=30)
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0

    def test_exact_class_balance(self):
        ds = generate_dataset(DatasetSpec(size=16), seed=1, n=30)
        assert np.bincount(ds.labels).tolist() == [10, 10, 10]

    def test_round_robin_assignment(self):
        ds = generate_dataset(DatasetSpec(size=16), seed=1, n=7)
        assert ds.labels.tolist() == [0, 1, 2, 0, 1, 2, 0]

    def test_prefix_stability(self):
        # drawing more images never changes earlier ones
        spec = DatasetSpec(size=16)
        small = generate_dataset(spec, seed=9, n=5)
        large = generate_dataset(spec, seed=9, n=20)
        assert np.array_equal(large.images[:5], small.images)

    def test_split_is_last_fraction(self):
        ds = generate_dataset(DatasetSpec(size=16), seed=2, n=30)
        train, hold = ds.split(0.2)
        assert len(train) == 24 and len(hold) == 6
        assert np.array_equal(hold.images, ds.images[24:])

    def test_container_roundtrip(self, tmp_path):
        ds = generate_dataset(DatasetSpec(size=16), seed=5, n=9)
        save_dataset(tmp_path / "d.swyc", ds)
        back = load_dataset(tmp_path / "d.swyc")
        assert np.array_equal(back.images, ds.images)
        assert back.spec == ds.spec and back.seed == 5

    def test_probe_image_structure(self):
        probe = half_flat_half_checker(16)
        assert probe.shape == (16, 16, 3)
        left = probe[:, :8, :]
        assert float(left.std(axis=(0, 1)).max()) < 1e-6  # flat per channel
        right = probe[:, 8:, 0]
        assert set(np.unique(np.sign(right))) == {-1.0, 1.0}  # checker half

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            DatasetSpec(families=("gratings", "plasma"))


class TestPpm:
    def test_header_format(self, tmp_path):
        img = PrngState(0).normal((5, 7, 3), dtype=np.float32).clip(-1, 1)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n7 5\n255\n")
        assert len(raw) == len(b"P6\n7 5\n255\n") + 5 * 7 * 3

    def test_black_image_zero_payload(self, tmp_path):
        path = tmp_path / "black.ppm"
        write_ppm(path, np.full((4, 4, 3), -1.0, dtype=np.float32))
        payload = path.read_bytes().split(b"255\n", 1)[1]
        assert payload == bytes(4 * 4 * 3)

    def test_roundtrip_quantization_bound(self, tmp_path):
        img = PrngState(1).normal((8, 8, 3), dtype=np.float32).clip(-1, 1)
        path = tmp_path / "r.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert np.abs(back - img).max() <= 1.0 / 127.5

    def test_malformed_rejected(self, tmp_path):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(PpmError):
            read_ppm(bad)
        trunc = tmp_path / "trunc.ppm"
        trunc.write_bytes(b"P6\n4 4\n255\n" + bytes(5))
        with pytest.raises(PpmError):
            read_ppm(trunc)

    def test_montage_width(self):
        imgs = [np.zeros((4, 4, 3), np.float32)] * 3
        wide = montage(imgs, pad=1)
        assert wide.shape == (4, 4 * 3 + 2, 3)


class TestContainer:
    def test_save_load_save_byte_identical(self, tmp_path):
        prng = PrngState(2)
        tensors = {"a/w": prng.normal((3, 4), dtype=np.float32),
                   "b/v": prng.normal((7,), dtype=np.float64),
                   "c/i": np.arange(5, dtype=np.int64)}
        meta = {"kind": "model", "notes": {"z": 1, "a": [1, 2]}}
        p1, p2 = tmp_path / "a.swyc", tmp_path / "b.swyc"
        write_container(p1, meta, tensors)
        m, t = read_container(p1)
        write_container(p2, m, t)
        assert p1.read_bytes() == p2.read_bytes()
        assert m == meta
        for k in tensors:
            assert np.array_equal(t[k], tensors[k])
            assert t[k].dtype == tensors[k].dtype

    def test_tampered_magic_rejected(self, tmp_path):
        path = tmp_path / "x.swyc"
        write_container(path, {"kind": "model"}, {"w": np.zeros(2, np.float32)})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            read_meta(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "x.swyc"
        write_container(path, {"kind": "model"}, {"w": np.zeros(2, np.float32)})
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            read_meta(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "x.swyc"
        write_container(path, {"kind": "model"}, {"w": np.ones(100, np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            read_container(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "x.swyc"
        write_container(path, {"kind": "model"}, {"w": np.ones(3, np.float32)})
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            read_container(path)

    def test_meta_validation_runs_before_tensors(self, tmp_path):
        # corrupt the tensor payload; a failing meta check must fire first
        path = tmp_path / "x.swyc"
        write_container(path, {"kind": "dataset"}, {"w": np.ones(3, np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # truncate payload

        def reject(meta):
            raise CheckpointError("rejected by config check")

        with pytest.raises(CheckpointError, match="rejected by config check"):
            read_container(path, validate_meta=reject)


class TestPsnr:
    def test_identical_images_inf(self):
        x = PrngState(3).normal((4, 4, 3))
        assert psnr(x, x.copy()) == math.inf

    def test_peak_squared_error_is_zero_db(self):
        x = np.zeros((2, 2, 3))
        y = np.full((2, 2, 3), 2.0)  # mse = 4 = peak^2
        assert abs(psnr(x, y)) < 1e-9

    def test_matches_hand_formula(self):
        prng = PrngState(4)
        x = prng.normal((3, 5, 5, 3))
        y = prng.normal((3, 5, 5, 3))
        mse = np.mean((x - y) ** 2)
        assert abs(psnr(x, y) - 10 * math.log10(4.0 / mse)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


@pytest.fixture(scope="module")
def mmd_bundle():
    return tiny_bundle(seed=44)


@pytest.fixture(scope="module")
def mmd_sets():
    grat = generate_dataset(DatasetSpec(size=16, families=("gratings",)),
                            seed=5, n=60)
    voro = generate_dataset(DatasetSpec(size=16, families=("voronoi",)),
                            seed=6, n=60)
    grat2 = generate_dataset(DatasetSpec(size=16, families=("gratings",)),
                             seed=7, n=60)
    return grat.images, voro.images, grat2.images


class TestFeatureMmd:
    @pytest.fixture()
    def bundle(self, mmd_bundle):
        return mmd_bundle

    @pytest.fixture()
    def sets(self, mmd_sets):
        return mmd_sets

    def test_same_set_within_unbiased_envelope(self, bundle, sets):
        a = sets[0]
        val = feature_mmd(a, a.copy(), bundle)
        assert abs(val) <= 2.0 / len(a)

    def test_symmetry_and_shuffle_invariance(self, bundle, sets):
        a, b, _ = sets
        ab = feature_mmd(a, b, bundle)
        ba = feature_mmd(b, a, bundle)
        assert abs(ab - ba) < 1e-12
        perm = PrngState(8).integers(10**9, (len(a),)).argsort()
        assert abs(feature_mmd(a[perm], b, bundle) - ab) < 1e-12

    def test_permutation_null_band(self, bundle, sets):
        # same-family sets sit inside the permutation null; cross-family
        # sets break out of it
        grat, voro, grat2 = sets
        fa = frozen_feature_matrix(grat, bundle)
        fb_same = frozen_feature_matrix(grat2, bundle)
        fb_diff = frozen_feature_matrix(voro, bundle)

        def null_band(fx, fy, n_perm=100):
            pooled = np.concatenate([fx, fy])
            stats = []
            prng = PrngState(99)
            for _ in range(n_perm):
                perm = prng.integers(10**9, (len(pooled),)).argsort()
                pa, pb = pooled[perm[:len(fx)]], pooled[perm[len(fx):]]
                stats.append(mmd_unbiased(pa, pb))
            return float(np.quantile(stats, 0.95))

        same_stat = mmd_unbiased(fa, fb_same)
        same_band = null_band(fa, fb_same)
        assert same_stat <= same_band, "same-family MMD outside null band"

        diff_stat = mmd_unbiased(fa, fb_diff)
        diff_band = null_band(fa, fb_diff)
        assert diff_stat > diff_band, "cross-family MMD inside null band"

    def test_degenerate_sets_flagged(self, bundle):
        same = np.zeros((12, 4), dtype=np.float64)
        with pytest.raises(ValueError, match="degenerate"):
            mmd_unbiased(same, same.copy())

    def test_minimum_set_size_enforced(self, bundle, sets):
        with pytest.raises(ValueError):
            feature_mmd(sets[0][:5], sets[1], bundle)
