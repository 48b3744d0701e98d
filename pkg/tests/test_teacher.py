import numpy as np
import pytest

from aand import teacher as tch
from aand.datasynth import compose_mask
from aand.tensorio import FormatError


def reference_encode(image, weights):
    """Straight-line forward with explicit loops over output pixels."""
    def conv(x, w, b, stride):
        c_out, c_in, k, _ = w.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        h = (x.shape[1] + 2 - k) // stride + 1
        wd = (x.shape[2] + 2 - k) // stride + 1
        out = np.zeros((c_out, h, wd))
        for i in range(h):
            for j in range(wd):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[:, i, j] = np.tensordot(w, patch, axes=([1, 2, 3], [0, 1, 2])) + b
        return out

    x = (np.asarray(image, np.float64) - 0.5) / 0.25
    levels = []
    for k in range(weights.depth):
        w0, b0, w1, b1 = (a.astype(np.float64) for a in weights.block(k))
        x = np.maximum(conv(x, w0, b0, 2), 0)
        x = np.maximum(conv(x, w1, b1, 1), 0)
        levels.append(x)
    return levels


@pytest.fixture(scope="module")
def weights():
    return tch.EncoderWeights(1, (16, 32, 64), seed=0)


def test_level_shapes(weights):
    out = tch.encode(np.zeros((1, 1, 64, 64)), weights)
    assert [f.shape for f in out] == [(1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8)]
    assert tch.pyramid_shapes(64, (16, 32, 64)) == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]


@pytest.mark.parametrize("fill", [0.0, None])
def test_matches_reference_forward(fill):
    w = tch.EncoderWeights(1, (4, 8, 8), seed=3)
    img = np.zeros((1, 16, 16)) if fill == 0.0 else np.random.default_rng(2).uniform(size=(1, 16, 16))
    ours = tch.encode(img[None], w)
    for a, b in zip(ours, reference_encode(img, w)):
        np.testing.assert_allclose(a[0], b, rtol=1e-4, atol=1e-5)


def test_encode_bit_identical_and_frozen(weights):
    img = np.random.default_rng(0).uniform(size=(2, 1, 64, 64))
    digest = weights.digest()
    a, b = tch.encode(img, weights), tch.encode(img, weights)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert weights.digest() == digest
    with pytest.raises(ValueError):
        weights.arrays["teacher/block0/conv0/w"][0, 0, 0, 0] = 1.0


def test_indivisible_size(weights):
    with pytest.raises(ValueError):
        tch.encode(np.zeros((1, 1, 60, 60)), weights)


def test_seeded_construction_is_stable():
    assert tch.EncoderWeights(seed=0).digest() == tch.EncoderWeights(seed=0).digest()
    assert tch.EncoderWeights(seed=0).digest() != tch.EncoderWeights(seed=1).digest()


class TestFeatureFiles:
    def test_round_trip(self, tmp_path, weights):
        pyr = tch.encode(np.random.default_rng(1).uniform(size=(2, 1, 64, 64)), weights)
        tch.save_features(tmp_path / "f.ckpt", pyr)
        back = tch.load_features(tmp_path / "f.ckpt", tch.pyramid_shapes(64, (16, 32, 64)))
        assert all(a.tobytes() == b.tobytes() for a, b in zip(pyr, back))

    def test_truncated(self, tmp_path, weights):
        tch.save_features(tmp_path / "f.ckpt", tch.encode(np.zeros((1, 1, 64, 64)), weights))
        raw = (tmp_path / "f.ckpt").read_bytes()
        (tmp_path / "f.ckpt").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            tch.load_features(tmp_path / "f.ckpt")

    def test_wrong_level_count_names_both(self, tmp_path):
        tch.save_features(tmp_path / "f.ckpt", [np.zeros((16, 32, 32)), np.zeros((32, 16, 16))])
        with pytest.raises(FormatError, match="K=2.*K=3"):
            tch.load_features(tmp_path / "f.ckpt", tch.pyramid_shapes(64, (16, 32, 64)))

    def test_wrong_shape(self, tmp_path):
        tch.save_features(tmp_path / "f.ckpt", [np.zeros((16, 32, 32)), np.zeros((32, 16, 16)), np.zeros((64, 4, 4))])
        with pytest.raises(FormatError, match="level2"):
            tch.load_features(tmp_path / "f.ckpt", tch.pyramid_shapes(64, (16, 32, 64)))


class TestMasks:
    def test_zero_mask(self):
        for m in tch.level_masks(np.zeros((64, 64)), 3):
            assert not m.any()

    def test_single_pixel(self):
        mask = np.zeros((64, 64), np.uint8)
        mask[37, 10] = 1
        for k, m in enumerate(tch.level_masks(mask, 3)):
            stride = 2 ** (k + 1)
            assert m.sum() == 1 and m[37 // stride, 10 // stride] == 1

    @pytest.mark.parametrize("seed", range(5))
    def test_block_scan_oracle(self, seed):
        mask = (np.random.default_rng(seed).uniform(size=(16, 16)) < 0.05).astype(np.uint8)
        expected = np.zeros((4, 4), np.uint8)
        for i in range(4):
            for j in range(4):
                expected[i, j] = int(any(mask[4 * i + a, 4 * j + b] for a in range(4) for b in range(4)))
        np.testing.assert_array_equal(tch.subsample_mask(mask, 2), expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_intersection_monotone(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.uniform(size=(32, 32)) < 0.3).astype(np.uint8)
        f = (rng.uniform(size=(32, 32)) < 0.5).astype(np.uint8)
        for k in range(1, 4):
            assert np.all(tch.subsample_mask(compose_mask(a, f), k) <= tch.subsample_mask(a, k))


class TestPartition:
    def test_all_zero_and_all_one(self):
        f = np.random.default_rng(0).standard_normal((4, 3, 5)).astype(np.float32)
        p = tch.partition_patches(f, np.zeros((3, 5)))
        assert len(p.abnormal) == 0 and len(p.normal) == 15
        p = tch.partition_patches(f, np.ones((3, 5)))
        assert len(p.normal) == 0 and len(p.abnormal) == 15

    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((6, 4, 4)).astype(np.float32)
        p = tch.partition_patches(f, rng.integers(0, 2, (4, 4)))
        assert p.reassemble().tobytes() == f.tobytes()

    def test_mask_mismatch(self):
        with pytest.raises(ValueError):
            tch.partition_patches(np.zeros((2, 4, 4)), np.zeros((3, 3)))
