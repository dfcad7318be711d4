import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskmae import data
from deskmae.data import AugmentSpec, ChannelStats, PackedDataset
from deskmae.synth import make_corpus


def random_ds(count, h=4, w=5, c=3, k=7, seed=0):
    rng = np.random.default_rng(seed)
    return PackedDataset(h, w, c, k, rng.integers(0, k, count), rng.integers(0, 256, (count, h, w, c)))


class TestPacked:
    def test_empty(self, tmp_path):
        path = tmp_path / "e.bin"
        data.write_packed(path, random_ds(0))
        assert len(data.load_packed(path)) == 0
        assert path.stat().st_size == 6 + 20

    def test_single_sample_byte_count(self, tmp_path):
        path = tmp_path / "one.bin"
        ds = PackedDataset(2, 2, 3, 5, [4], np.arange(12, dtype=np.uint8))
        data.write_packed(path, ds)
        raw = path.read_bytes()
        assert len(raw) == 6 + 20 + 4 + 12
        assert raw[:6] == b"MAEDS1"
        assert np.frombuffer(raw[6:26], "<u4").tolist() == [1, 2, 2, 3, 5]
        back = data.load_packed(path)
        assert back.labels.tolist() == [4]
        assert back.pixels.reshape(-1).tolist() == list(range(12))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 20), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
    def test_round_trip(self, tmp_path_factory, count, h, w, seed):
        path = tmp_path_factory.mktemp("rt") / "d.bin"
        ds = random_ds(count, h, w, seed=seed)
        data.write_packed(path, ds)
        back = data.load_packed(path)
        assert back.pixels.tobytes() == ds.pixels.tobytes()
        assert np.array_equal(back.labels, ds.labels)
        assert (back.height, back.width, back.channels, back.n_classes) == (h, w, 3, 7)

    def test_rejects(self, tmp_path):
        path = tmp_path / "d.bin"
        data.write_packed(path, random_ds(3))
        raw = path.read_bytes()
        (tmp_path / "magic.bin").write_bytes(b"MAEDS2" + raw[6:])
        with pytest.raises(data.DataError, match="magic"):
            data.load_packed(tmp_path / "magic.bin")
        (tmp_path / "trunc.bin").write_bytes(raw[:-1])
        with pytest.raises(data.DataError, match="byte"):
            data.load_packed(tmp_path / "trunc.bin")
        bad = bytearray(raw)
        bad[26:30] = (9).to_bytes(4, "little")
        (tmp_path / "label.bin").write_bytes(bytes(bad))
        with pytest.raises(data.DataError, match="byte 26"):
            data.load_packed(tmp_path / "label.bin")


class TestStats:
    def test_sidecar_round_trip_and_mean(self, tmp_path):
        ds = random_ds(10)
        stats = data.compute_stats(ds)
        data.write_stats(tmp_path / "d.stats", stats)
        back = data.read_stats(tmp_path / "d.stats")
        assert back == stats
        direct = [ds.pixels[..., c].astype(float).sum() / ds.pixels[..., c].size / 255 for c in range(3)]
        np.testing.assert_allclose(stats.mean, direct, atol=1e-6)

    def test_stats_path(self):
        assert str(data.stats_path("x/corpus.bin")) == "x/corpus.stats"


class TestGeometry:
    def test_full_scale_square_is_resize_only(self):
        img = np.random.default_rng(0).integers(0, 256, (8, 8, 3)).astype(np.uint8)
        spec = AugmentSpec(out_size=8, scale_range=(1.0, 1.0), ratio_range=(1.0, 1.0), flip=False)
        out = data.random_resized_crop(img, spec, np.random.default_rng(1))
        np.testing.assert_allclose(out, img / 255.0, atol=1e-6)

    def test_fallback_center_when_no_fit(self):
        img = np.random.default_rng(0).random((6, 10, 3))
        spec = AugmentSpec(out_size=6, scale_range=(1.0, 1.0))
        # whole-image area never fits a 6x10 image with aspect in [3/4, 4/3]
        assert data.sample_crop_box(6, 10, spec, np.random.default_rng(0)) == (0, 2, 6, 6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(4, 20), st.integers(4, 20), st.integers(2, 12), st.integers(0, 10**6))
    def test_shape_and_constant_preserved(self, h, w, out, seed):
        img = np.full((h, w, 3), 77, np.uint8)
        spec = AugmentSpec(out_size=out)
        res = data.random_resized_crop(img, spec, np.random.default_rng(seed))
        assert res.shape == (out, out, 3)
        assert np.abs(res - 77 / 255).max() < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(data.AUG_MODES), st.integers(0, 10**6))
    def test_standardized_range(self, mode, seed):
        rng = np.random.default_rng(seed)
        img = rng.integers(0, 256, (12, 12, 3)).astype(np.uint8)
        stats = ChannelStats((0.4, 0.5, 0.6), (0.2, 0.25, 0.3))
        out = data.augment(img, AugmentSpec(mode=mode, out_size=10), rng, stats)
        lo = (0 - np.array(stats.mean)) / np.array(stats.std)
        hi = (1 - np.array(stats.mean)) / np.array(stats.std)
        assert np.all(out >= lo - 1e-5) and np.all(out <= hi + 1e-5)

    def test_center_crop(self):
        img = np.arange(7 * 9 * 1).reshape(7, 9, 1)
        assert np.array_equal(data.center_crop(img, 7), img[:, 1:8])
        sq = np.arange(25).reshape(5, 5, 1)
        assert np.array_equal(data.center_crop(sq, 5), sq)
        out = data.center_crop(img, 4)
        assert out[0, 0, 0] == img[(7 - 4) // 2, (9 - 4) // 2, 0]
        with pytest.raises(data.DataError):
            data.center_crop(img, 8)

    def test_hflip(self):
        img = np.random.default_rng(0).random((3, 4, 3))
        assert np.array_equal(data.hflip(data.hflip(img, force=True), force=True), img)
        assert np.array_equal(data.hflip(img, force=True), img[:, ::-1])
        flips = sum(data.hflip(img, np.random.default_rng(s))[0, 0, 0] != img[0, 0, 0] for s in range(400))
        assert 150 < flips < 250

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            AugmentSpec(mode="color_jitter")


class TestBatches:
    def test_single_batch_is_permutation(self):
        ds = random_ds(9)
        (b,) = list(data.batches(ds, 9, seed=1, epoch=0))
        assert sorted(b.indices.tolist()) == list(range(9))

    def test_deterministic(self):
        ds = random_ds(10)
        a = [b.indices.tolist() for b in data.batches(ds, 3, 5, 2, AugmentSpec(out_size=4))]
        b = [b.indices.tolist() for b in data.batches(ds, 3, 5, 2, AugmentSpec(out_size=4))]
        c = [b.indices.tolist() for b in data.batches(ds, 3, 5, 3)]
        assert a == b and a != c

    @pytest.mark.parametrize("bs", [1, 3, 4, 7, 11, 30])
    def test_coverage_exactly_once(self, bs):
        ds = random_ds(11)
        got = np.concatenate([b.indices for b in data.batches(ds, bs, 0, 0)])
        assert sorted(got.tolist()) == list(range(11))
        sizes = [len(b.indices) for b in data.batches(ds, bs, 0, 0)]
        assert sum(sizes) == 11 and all(s == bs for s in sizes[:-1])


class TestPpm:
    def test_round_trip_with_comment(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 3)).astype(np.uint8)
        path = tmp_path / "a.ppm"
        path.write_bytes(b"P6\n# made by hand\n5 3\n255\n" + img.tobytes())
        assert np.array_equal(data.read_ppm(path), img)
        data.write_ppm(tmp_path / "b.ppm", img)
        assert np.array_equal(data.read_ppm(tmp_path / "b.ppm"), img)

    def test_rejects_ascii(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(data.DataError):
            data.read_ppm(tmp_path / "a.ppm")


def test_synthetic_corpus():
    ds = make_corpus(8, size=16, seed=3)
    assert ds.pixels.shape == (8, 16, 16, 3) and ds.labels.tolist() == [0, 1] * 4
    assert np.array_equal(make_corpus(8, size=16, seed=3).pixels, ds.pixels)
