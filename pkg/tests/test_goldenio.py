import numpy as np
import pytest

from crossview.flow import AttentionParams, Correspondence
from crossview.goldenio import (
    FormatError,
    load_attention_params,
    load_correspondence,
    load_kpconv_params,
    read_blocks,
    read_view_image,
    save_attention_params,
    save_correspondence,
    save_kpconv_params,
    write_blocks,
    write_view_image,
)
from crossview.head import KpconvParams


class TestViewImage:
    def test_round_trip_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = rng.random((4, 6, 5)).astype("<f4")
        pi = rng.integers(-1, 20, (4, 6)).astype("<i4")
        path = tmp_path / "img.gfvw"
        write_view_image(path, feats, pi)
        feats2, pi2 = read_view_image(path)
        np.testing.assert_array_equal(feats2, feats)
        np.testing.assert_array_equal(pi2, pi)

    def test_round_trip_i32_labels(self, tmp_path):
        labels = np.arange(12, dtype="<i4").reshape(3, 4, 1)
        pi = np.full((3, 4), -1, dtype="<i4")
        path = tmp_path / "labels.gfvw"
        write_view_image(path, labels, pi)
        feats2, _ = read_view_image(path)
        np.testing.assert_array_equal(feats2, labels)
        assert feats2.dtype == np.dtype("<i4")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.gfvw"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            read_view_image(path)

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "img.gfvw"
        write_view_image(path, rng.random((2, 2, 2)).astype("<f4"), np.zeros((2, 2), dtype="<i4"))
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(FormatError, match="truncated"):
            read_view_image(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "img.gfvw"
        write_view_image(path, np.zeros((1, 1, 1), dtype="<f4"), np.zeros((1, 1), dtype="<i4"))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            read_view_image(path)

    def test_deterministic_bytes(self, tmp_path):
        feats = np.arange(8, dtype="<f4").reshape(2, 2, 2)
        pi = np.zeros((2, 2), dtype="<i4")
        a, b = tmp_path / "a", tmp_path / "b"
        write_view_image(a, feats, pi)
        write_view_image(b, feats, pi)
        assert a.read_bytes() == b.read_bytes()


class TestBlocks:
    def test_round_trip_mixed(self, tmp_path):
        blocks = {
            "scores": np.random.default_rng(0).random((7, 3)),
            "ids": np.arange(5, dtype="<i4"),
            "flag": np.array(1, dtype="|u1"),
        }
        path = tmp_path / "b.gftb"
        write_blocks(path, blocks)
        again = read_blocks(path)
        assert set(again) == set(blocks)
        for k in blocks:
            np.testing.assert_array_equal(again[k], blocks[k])
            assert again[k].shape == np.asarray(blocks[k]).shape

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "b.gftb"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_blocks(path)


class TestParamsRoundTrip:
    def test_attention(self, tmp_path):
        p = AttentionParams.random(4, 3, kernel_size=3, attention="sigmoid", seed=5)
        path = tmp_path / "att.gftb"
        save_attention_params(path, p)
        q = load_attention_params(path)
        np.testing.assert_array_equal(q.mu_kernel, p.mu_kernel)
        np.testing.assert_array_equal(q.theta_bn.var, p.theta_bn.var)
        assert q.attention == "sigmoid"

    def test_kpconv(self, tmp_path):
        p = KpconvParams.random(6, 4, num_points=9, radius=0.7, sigma=0.35, seed=2)
        path = tmp_path / "kp.gftb"
        save_kpconv_params(path, p)
        q = load_kpconv_params(path)
        np.testing.assert_array_equal(q.kernel_points, p.kernel_points)
        np.testing.assert_array_equal(q.weights, p.weights)
        assert (q.sigma, q.radius) == (p.sigma, p.radius)

    def test_correspondence(self, tmp_path):
        coords = np.full((3, 4, 2), -1, dtype=np.int32)
        coords[1, 2] = (3, 1)
        c = Correspondence(coords, (5, 6))
        path = tmp_path / "corr.gftb"
        save_correspondence(path, c)
        q = load_correspondence(path)
        np.testing.assert_array_equal(q.coords, c.coords)
        assert q.source_shape == (5, 6)
