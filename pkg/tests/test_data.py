import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arnet import data as D
from arnet.metrics import dice_iou


class TestCodec:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 10_000))
    def test_map_roundtrip(self, h, w, binary, seed):
        p = np.random.default_rng(seed).random((h, w))
        back = D.decode_netpbm(D.encode_netpbm(D.quantize(p), binary)) / 255.0
        assert np.abs(back - p).max() <= 1 / 510 + 1e-15

    def test_mask_file_roundtrip(self, tmp_path, rng):
        p = rng.random((6, 9))
        D.save_mask(tmp_path / "m.pgm", p)
        assert np.abs(D.load_map(tmp_path / "m.pgm") - p).max() <= 1 / 510 + 1e-15

    def test_image_roundtrip(self, tmp_path, rng):
        img = rng.random((3, 5, 7))
        D.save_image(tmp_path / "i.ppm", img)
        got = D.load_image(tmp_path / "i.ppm")
        assert got.shape == (3, 5, 7) and np.abs(got - img).max() <= 1 / 510 + 1e-15

    def test_p2_equals_p5(self, rng):
        a = rng.integers(0, 256, (4, 6), dtype=np.uint8)
        assert np.array_equal(D.decode_netpbm(D.encode_netpbm(a, True)), D.decode_netpbm(D.encode_netpbm(a, False)))

    def test_p3_equals_p6(self, rng):
        a = rng.integers(0, 256, (3, 2, 3), dtype=np.uint8)
        assert np.array_equal(D.decode_netpbm(D.encode_netpbm(a, True)), D.decode_netpbm(D.encode_netpbm(a, False)))

    def test_comments_in_header(self):
        buf = b"P2\n# a comment\n2 1 # width height\n255\n7 250\n"
        assert D.decode_netpbm(buf).tolist() == [[7, 250]]

    def test_truncated(self):
        with pytest.raises(D.NetpbmError, match="expected 12 bytes, got 5"):
            D.decode_netpbm(b"P5\n4 3\n255\n" + bytes(5))
        with pytest.raises(D.NetpbmError, match="expected 4 samples, got 3"):
            D.decode_netpbm(b"P2 2 2 255 1 2 3")

    def test_maxval(self):
        with pytest.raises(D.NetpbmError, match="maxval 65535 at byte 7"):
            D.decode_netpbm(b"P5\n2 2\n65535\n" + bytes(8))

    def test_bad_header_offset(self):
        with pytest.raises(D.NetpbmError, match="byte 5"):
            D.decode_netpbm(b"P5\n4 x3\n255\n")
        with pytest.raises(D.NetpbmError, match="magic"):
            D.decode_netpbm(b"P7\n")
        with pytest.raises(D.NetpbmError, match="header truncated"):
            D.decode_netpbm(b"P5\n4 ")

    def test_error_names_file(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(D.NetpbmError, match="bad.pgm"):
            D.load_map(p)

    def test_mask_threshold(self, tmp_path):
        D.write_netpbm(tmp_path / "m.pgm", np.array([[0, 127, 128, 255]], dtype=np.uint8))
        assert D.load_mask(tmp_path / "m.pgm").tolist() == [[0, 0, 1, 1]]

    def test_save_mask_rounding(self, tmp_path):
        D.save_mask(tmp_path / "m.pgm", np.array([[0.5, 1 / 255 * 0.49, 1.2, -0.1]]))
        assert D.read_netpbm(tmp_path / "m.pgm").tolist() == [[128, 0, 255, 0]]

    def test_png_optional(self, tmp_path, rng):
        Image = pytest.importorskip("PIL.Image")
        a = rng.integers(0, 256, (4, 5), dtype=np.uint8)
        Image.fromarray(a).save(tmp_path / "m.png")
        np.testing.assert_array_equal(D.load_map(tmp_path / "m.png"), a / 255)


class TestSynth:
    def test_bitwise_determinism(self, tmp_path):
        cfg = D.SynthConfig(count=3, seed=9, shape="blob")
        D.synthesize(cfg, tmp_path / "a")
        D.synthesize(cfg, tmp_path / "b")
        for sub in ("image/synth_0000.ppm", "image/synth_0002.ppm", "mask/synth_0001.pgm", "manifest.txt"):
            assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()

    def test_manifest(self, tmp_path):
        stems = D.synthesize(D.SynthConfig(count=2, seed=4, delta=0.2), tmp_path)
        rows = D.read_manifest(tmp_path)
        assert [r[0] for r in rows] == stems == ["synth_0000", "synth_0001"]
        assert rows[1][1] == D.sample_seed(4, 1) and rows[0][2] == 0.2

    @pytest.mark.parametrize("shape", ["ellipse", "blob"])
    @pytest.mark.parametrize("delta", [0.05, 0.15, 0.5])
    def test_offset_is_delta(self, shape, delta, tmp_path):
        D.synthesize(D.SynthConfig(count=4, delta=delta, shape=shape, seed=2), tmp_path)
        ds = D.Dataset(tmp_path)
        for i in range(len(ds)):
            img, mask = ds.sample(i)
            g = img.mean(axis=0)
            m = mask > 0
            assert g[m].mean() - g[~m].mean() == pytest.approx(delta, abs=0.01)

    def test_mask_equals_rasterized_shape(self):
        cfg = D.SynthConfig(size=64, seed=1)
        s = D.sample_seed(1, 0)
        _, mask = D.synth_sample(cfg, s)
        assert np.array_equal(mask, D.random_shape(np.random.default_rng(s), 64, "ellipse"))

    def test_full_contrast_threshold_oracle(self, tmp_path):
        D.synthesize(D.SynthConfig(count=4, delta=1.0, seed=3), tmp_path)
        ds = D.Dataset(tmp_path)
        for i in range(len(ds)):
            img, mask = ds.sample(i)
            assert dice_iou(img.mean(axis=0), mask, 0.5)[1] > 0.95

    def test_zero_contrast(self, tmp_path):
        D.synthesize(D.SynthConfig(count=1, delta=0.0, seed=3), tmp_path)
        img, mask = D.Dataset(tmp_path).sample(0)
        g = img.mean(axis=0)
        assert 0 < mask.sum() < mask.size
        assert abs(g[mask > 0].mean() - g[mask == 0].mean()) < 0.01

    @pytest.mark.parametrize("kw", [dict(count=0), dict(size=48), dict(delta=1.5), dict(grain=0),
                                    dict(shape="star")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            D.SynthConfig(**kw)


class TestDataset:
    def test_batches_keep_partial(self, tmp_path):
        D.synthesize(D.SynthConfig(count=10, seed=0), tmp_path)
        batches = list(D.dataset_iter(tmp_path, 8, shuffle_seed=3))
        assert [len(b[2]) for b in batches] == [8, 2]
        images, masks, _ = batches[0]
        assert images.shape == (8, 3, 64, 64) and masks.shape == (8, 1, 64, 64)
        assert set(np.unique(masks)) <= {0.0, 1.0}
        assert sorted(s for b in batches for s in b[2]) == [f"synth_{i:04d}" for i in range(10)]

    def test_order_deterministic(self, synth_root):
        a = [b[2] for b in D.dataset_iter(synth_root, 1, shuffle_seed=5, epoch=2)]
        b = [b[2] for b in D.dataset_iter(synth_root, 1, shuffle_seed=5, epoch=2)]
        assert a == b
        assert [s for b in D.dataset_iter(synth_root, 4, shuffle_seed=None) for s in b[2]] == sorted(sum(a, []))

    def test_missing_mask_named(self, tmp_path):
        D.synthesize(D.SynthConfig(count=3, seed=0), tmp_path)
        (tmp_path / "mask" / "synth_0001.pgm").unlink()
        (tmp_path / "image" / "synth_0002.ppm").unlink()
        with pytest.raises(D.DatasetError) as exc:
            D.Dataset(tmp_path)
        assert "images without mask: synth_0001" in str(exc.value)
        assert "masks without image: synth_0002" in str(exc.value)

    def test_samples_immutable(self, synth_root):
        img, mask = D.Dataset(synth_root).sample(0)
        with pytest.raises(ValueError):
            img[0, 0, 0] = 1.0

    def test_resize_on_load(self, synth_root):
        img, mask = D.Dataset(synth_root, size=32).sample(0)
        assert img.shape == (3, 32, 32) and mask.shape == (32, 32)
        assert set(np.unique(mask)) <= {0.0, 1.0}

    def test_missing_dir(self, tmp_path):
        with pytest.raises(D.DatasetError, match="missing directory"):
            D.Dataset(tmp_path)
