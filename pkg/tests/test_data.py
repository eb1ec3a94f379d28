import json
import os

import numpy as np
import pytest

from spgim import imio
from spgim.data import (
    BACKGROUND, FOREGROUND, UNKNOWN, ForegroundAsset, SynthesisConfig, build_manifest, compose,
    fit_background, make_saliency_target, make_trimap, materialize, read_manifest,
)


def reflect_index(i, n):
    # half-sample symmetric extension: ... b a | a b c d | d c ...
    i = i % (2 * n)
    return i if i < n else 2 * n - 1 - i


def blur_oracle(plane, sigma, truncate=4.0):
    radius = int(truncate * sigma + 0.5)
    w = np.array([np.exp(-0.5 * (k / sigma) ** 2) for k in range(-radius, radius + 1)])
    w /= w.sum()
    h, wd = plane.shape
    tmp = np.zeros_like(plane)
    for y in range(h):
        for x in range(wd):
            tmp[y, x] = sum(w[k + radius] * plane[reflect_index(y + k, h), x]
                            for k in range(-radius, radius + 1))
    out = np.zeros_like(plane)
    for y in range(h):
        for x in range(wd):
            out[y, x] = sum(w[k + radius] * tmp[y, reflect_index(x + k, wd)]
                            for k in range(-radius, radius + 1))
    return out


def dilation_oracle(seed_mask, r):
    h, w = seed_mask.shape
    out = np.zeros_like(seed_mask, dtype=bool)
    pts = np.argwhere(seed_mask)
    for y in range(h):
        for x in range(w):
            out[y, x] = any((y - py) ** 2 + (x - px) ** 2 <= r * r for py, px in pts)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestCompose:
    def test_opaque_gives_foreground(self, rng):
        fg, bg = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        np.testing.assert_array_equal(compose(fg, bg, np.ones((8, 8))), fg)

    def test_transparent_gives_background(self, rng):
        fg, bg = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        np.testing.assert_array_equal(compose(fg, bg, np.zeros((8, 8))), bg)

    def test_quarter_blend(self):
        out = compose(np.ones((4, 4, 3)), np.zeros((4, 4, 3)), np.full((4, 4), 0.25))
        np.testing.assert_allclose(out, 0.25)

    def test_background_resized_to_cover(self, rng):
        asset = ForegroundAsset(rng.random((16, 24, 3)), rng.random((16, 24)), "a")
        out = compose(asset, rng.random((10, 10, 3)))
        assert out.shape == (16, 24, 3)

    def test_fit_background_center_crop(self):
        bg = np.zeros((10, 20, 3))
        bg[:, 5:15] = 1.0
        out = fit_background(bg, 10, 10)
        np.testing.assert_array_equal(out, np.ones((10, 10, 3)))

    def test_shape_mismatch_reports_dimensions(self, rng):
        with pytest.raises(ValueError, match=r"\(8, 8\).*\(6, 6\)"):
            compose(rng.random((8, 8, 3)), rng.random((6, 6, 3)), rng.random((8, 8)),
                    resize_background=False)

    def test_residual_after_8bit_round_trip(self, tmp_path, rng):
        for i in range(20):
            f = np.round(rng.random((16, 16, 3)) * 255) / 255
            b = np.round(rng.random((16, 16, 3)) * 255) / 255
            a = np.round(rng.random((16, 16)) * 255) / 255
            path = tmp_path / f"c{i}.png"
            imio.write_image(path, compose(f, b, a))
            back = imio.read_image(path)
            expected = a[..., None] * f + (1 - a[..., None]) * b
            assert np.abs(back - expected).max() <= 1 / 255


class TestSaliencyTarget:
    def test_constant_one(self):
        np.testing.assert_allclose(make_saliency_target(np.ones((32, 32)), 16, 1.0), 1.0)

    def test_constant_zero(self):
        np.testing.assert_allclose(make_saliency_target(np.zeros((32, 32)), 16, 1.0), 0.0)

    def test_shape(self):
        assert make_saliency_target(np.zeros((64, 32)), 16, 1.0).shape == (4, 2)

    def test_pixel_checkerboard_averages_out(self):
        board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
        np.testing.assert_allclose(make_saliency_target(board, 2, 1.0), 0.5)

    def test_block_checkerboard_matches_convolution_oracle(self):
        board = ((np.indices((8, 8)) // 2).sum(axis=0) % 2).astype(float)
        small = board.reshape(4, 2, 4, 2).mean(axis=(1, 3))
        expected = blur_oracle(small, 1.0)
        np.testing.assert_allclose(make_saliency_target(board, 2, 1.0), expected, atol=1e-12)

    def test_mass_preserved(self, rng):
        for _ in range(10):
            alpha = rng.random((64, 64))
            small = alpha.reshape(16, 4, 16, 4).mean(axis=(1, 3))
            target = make_saliency_target(alpha, 4, 1.0)
            assert abs(target.mean() - small.mean()) <= 1e-3
            assert 0.0 <= target.min() and target.max() <= 1.0

    @pytest.mark.parametrize("kwargs", [{"downsample": 0}, {"blur_sigma": 0.0}])
    def test_bad_parameters(self, kwargs):
        args = {"downsample": 2, "blur_sigma": 1.0, **kwargs}
        with pytest.raises(ValueError):
            make_saliency_target(np.zeros((8, 8)), **args)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            make_saliency_target(np.full((8, 8), 1.5), 2, 1.0)


class TestTrimap:
    def test_binary_alpha_zero_radius_has_no_unknown(self, rng):
        alpha = (rng.random((16, 16)) > 0.5).astype(float)
        tri = make_trimap(alpha, radius=(0, 0))
        assert not (tri.labels == UNKNOWN).any()
        assert set(np.unique(tri.labels)) <= {BACKGROUND, FOREGROUND}

    def test_half_alpha_is_all_unknown(self):
        for r in (0, 3, (1, 15)):
            tri = make_trimap(np.full((12, 12), 0.5), radius=r)
            assert (tri.labels == UNKNOWN).all()
            assert tri.degenerate

    def test_single_pixel_disk_dilation(self):
        alpha = np.zeros((9, 9))
        alpha[4, 4] = 0.4
        tri = make_trimap(alpha, radius=2)
        expected = dilation_oracle(alpha > 0, 2)
        np.testing.assert_array_equal(tri.labels == UNKNOWN, expected)
        assert expected.sum() == 13
        assert expected[2, 4] and not expected[2, 2]

    def test_radius_drawn_in_range_and_seeded(self):
        alpha = np.zeros((8, 8))
        radii = {make_trimap(alpha, radius=(1, 15), seed=s).radius for s in range(50)}
        assert radii <= set(range(1, 16)) and len(radii) > 5
        assert make_trimap(alpha, seed=3).radius == make_trimap(alpha, seed=3).radius

    def test_fractional_pixels_always_unknown(self, rng):
        for s in range(20):
            alpha = np.clip(rng.normal(0.5, 0.6, (16, 16)), 0, 1)
            tri = make_trimap(alpha, seed=s)
            frac = (alpha > 0) & (alpha < 1)
            assert (tri.labels[frac] == UNKNOWN).all()

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            make_trimap(np.zeros((4, 4)), threshold_lo=0.6, threshold_hi=0.4)


class TestManifest:
    def test_count(self):
        m = build_manifest(["a", "b"], [f"bg{i}" for i in range(5)], ratio=3)
        assert len(m) == 6

    def test_default_ratios(self):
        bgs = [f"bg{i}" for i in range(200)]
        assert build_manifest(["a"], bgs, split="train").composition_ratio == 100
        assert build_manifest(["a"], bgs, split="test").composition_ratio == 20

    def test_without_replacement_within_foreground(self):
        m = build_manifest(["a", "b", "c"], [f"bg{i}" for i in range(10)], ratio=10, seed=5)
        for fg in "abc":
            picks = [r.bg_id for r in m.records if r.fg_id == fg]
            assert len(set(picks)) == 10

    def test_deterministic(self):
        args = (["a", "b"], [f"bg{i}" for i in range(30)], 7, "train", 11)
        assert build_manifest(*args).to_jsonl() == build_manifest(*args).to_jsonl()
        other = build_manifest(["a", "b"], [f"bg{i}" for i in range(30)], 7, "train", 12)
        assert other.digest() != build_manifest(*args).digest()

    def test_small_pool_warns_and_replaces(self):
        with pytest.warns(UserWarning, match="replacement"):
            m = build_manifest(["a"], ["x", "y"], ratio=5)
        assert len(m) == 5
        assert all("bg_with_replacement" in r.flags for r in m.records)

    def test_empty_pool(self):
        with pytest.raises(ValueError):
            build_manifest(["a"], [], ratio=1)

    def test_json_fields(self):
        m = build_manifest(["a"], ["x", "y", "z"], ratio=2)
        for line in m.to_jsonl().splitlines():
            assert list(json.loads(line)) == [
                "image", "alpha", "trimap", "saliency", "fg_id", "bg_id", "seed", "flags"]

    def test_materialize_writes_referenced_files(self, tmp_path, rng):
        fg = ForegroundAsset(rng.random((32, 32, 3)), np.clip(rng.normal(0.5, 0.5, (32, 32)), 0, 1), "f")
        empty = ForegroundAsset(rng.random((32, 32, 3)), np.zeros((32, 32)), "e")
        bgs = {f"b{i}": rng.random((40, 48, 3)) for i in range(3)}
        m = build_manifest([fg, empty], list(bgs), ratio=2, seed=0)
        cfg = SynthesisConfig(saliency_downsample=16, radius_range=(1, 3))
        path = materialize(m, {"f": fg, "e": empty}, bgs, tmp_path, cfg)
        records = read_manifest(path)
        assert len(records) == 4
        for rec in records:
            for key in ("image", "alpha", "trimap", "saliency"):
                assert os.path.exists(getattr(rec, key))
            assert imio.read_image(rec.image).shape == (32, 32, 3)
            assert imio.read_alpha(rec.saliency).shape == (2, 2)
            assert set(np.unique(imio.read_labels(rec.trimap))) <= {0, 128, 255}
        assert all("degenerate_alpha" in r.flags for r in records if r.fg_id == "e")


def test_sixteen_bit_alpha_normalised(tmp_path):
    alpha = np.linspace(0, 1, 64).reshape(8, 8)
    imio.write_gray(tmp_path / "a16.png", alpha, bits=16)
    np.testing.assert_allclose(imio.read_alpha(tmp_path / "a16.png"), alpha, atol=1 / 65535)
