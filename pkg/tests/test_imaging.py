import math

import numpy as np
import pytest

from xriqa.data import make_tier_set
from xriqa.imaging import (Raster, build_pyramid, crop_to_4_3, lanczos_resample,
                           load_raster, save_raster_png, to_grayscale)


def brute_force_lanczos(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Direct 2D convolution oracle: explicit kernel products, no separable
    matrix shortcuts."""
    def kern(x):
        if abs(x) >= 3.0:
            return 0.0
        if x == 0.0:
            return 1.0
        return (math.sin(math.pi * x) / (math.pi * x)) * \
               (math.sin(math.pi * x / 3) / (math.pi * x / 3))

    h, w, c = img.shape
    sy, sx = h / out_h, w / out_w
    stretch_y, stretch_x = max(sy, 1.0), max(sx, 1.0)
    out = np.zeros((out_h, out_w, c))
    for j in range(out_h):
        cy = (j + 0.5) * sy - 0.5
        for i in range(out_w):
            cx = (i + 0.5) * sx - 0.5
            acc = np.zeros(c)
            wsum = 0.0
            for yy in range(int(np.ceil(cy - 3 * stretch_y)),
                            int(np.floor(cy + 3 * stretch_y)) + 1):
                wy = kern((yy - cy) / stretch_y)
                for xx in range(int(np.ceil(cx - 3 * stretch_x)),
                                int(np.floor(cx + 3 * stretch_x)) + 1):
                    wxy = wy * kern((xx - cx) / stretch_x)
                    acc += wxy * img[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
                    wsum += wxy
            out[j, i] = acc / wsum
    return np.clip(out, 0.0, 1.0)


class TestCrop:
    def test_already_4_3_is_identity(self):
        img = Raster(np.random.default_rng(0).uniform(size=(1536, 2048, 1)))
        out = crop_to_4_3(img)
        assert out.geometry == (2048, 1536)
        np.testing.assert_array_equal(out.samples, img.samples)

    def test_square_input_trims_symmetrically(self):
        data = np.zeros((2048, 2048, 1))
        data[256:1792] = 1.0  # exactly the expected crop band
        out = crop_to_4_3(Raster(data))
        assert out.geometry == (2048, 1536)
        assert out.samples.min() == 1.0

    def test_3000x1700(self):
        out = crop_to_4_3(Raster(np.zeros((1700, 3000, 1))))
        assert out.geometry == (2264, 1698)

    def test_width_multiple_of_four(self):
        for w, h in [(101, 99), (2049, 1537), (37, 1000)]:
            out = crop_to_4_3(Raster(np.zeros((h, w, 1))))
            assert out.width % 4 == 0
            assert 3 * out.width == 4 * out.height

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            crop_to_4_3(Raster(np.zeros((2, 3, 1))))


class TestLanczos:
    def test_constant_preserved(self):
        img = Raster(np.full((20, 24, 3), 0.5))
        for ow, oh in [(7, 5), (24, 20), (48, 40)]:
            out = lanczos_resample(img, ow, oh)
            assert np.abs(out.samples - 0.5).max() < 1e-9

    def test_identity_size_reproduces_input(self):
        img = Raster(np.random.default_rng(1).uniform(size=(16, 12, 1)))
        out = lanczos_resample(img, 12, 16)
        assert np.abs(out.samples - img.samples).max() < 1e-9

    def test_impulse_downscale_matches_oracle(self):
        img = np.zeros((8, 8, 1))
        img[3, 3, 0] = 1.0
        mine = lanczos_resample(Raster(img), 4, 4).samples
        ref = brute_force_lanczos(img, 4, 4)
        assert np.abs(mine - ref).max() < 1e-9

    def test_random_resizes_match_oracle(self):
        rng = np.random.default_rng(5)
        for ow, oh in [(5, 7), (13, 4), (9, 9)]:
            img = rng.uniform(size=(6, 10, 1))
            mine = lanczos_resample(Raster(img), ow, oh).samples
            ref = brute_force_lanczos(img, ow, oh)
            assert np.abs(mine - ref).max() < 1e-9

    def test_output_range_clipped(self):
        rng = np.random.default_rng(2)
        img = Raster((rng.uniform(size=(32, 32, 1)) > 0.5).astype(float))
        out = lanczos_resample(img, 11, 13)
        assert out.samples.min() >= 0.0 and out.samples.max() <= 1.0

    def test_bad_geometry_rejected(self):
        with pytest.raises(ValueError):
            lanczos_resample(Raster(np.zeros((4, 4, 1))), 0, 4)


class TestPyramid:
    def test_tier_geometries(self):
        tiers = make_tier_set(64, 48)
        crop = Raster(np.random.default_rng(0).uniform(size=(192, 256, 1)))
        pyramid = build_pyramid(crop, tiers)
        assert pyramid["S"].geometry == (64, 48)
        assert pyramid["M"].geometry == (128, 96)
        assert pyramid["L"].geometry == (256, 192)

    def test_constant_crop_constant_tiers(self):
        tiers = make_tier_set(64, 48)
        pyramid = build_pyramid(Raster(np.full((192, 256, 1), 0.25)), tiers)
        for t in "SML":
            assert np.abs(pyramid[t].samples - 0.25).max() < 1e-9

    def test_s_tier_is_direct_resample(self):
        tiers = make_tier_set(64, 48)
        crop = Raster(np.random.default_rng(3).uniform(size=(192, 256, 1)))
        pyramid = build_pyramid(crop, tiers)
        direct = lanczos_resample(crop, 64, 48)
        np.testing.assert_array_equal(pyramid["S"].samples, direct.samples)

    def test_crop_smaller_than_top_tier_rejected(self):
        tiers = make_tier_set(64, 48)
        with pytest.raises(ValueError, match="smaller than tier"):
            build_pyramid(Raster(np.zeros((96, 128, 1))), tiers)

    def test_cascaded_vs_direct_tolerance(self):
        # documented tolerance, not equality: L->M->S differs from crop->S
        # by < 2/255 per sample on smooth natural-like content
        tiers = make_tier_set(64, 48)
        coarse = Raster(np.random.default_rng(9).uniform(size=(12, 16, 1)))
        crop = lanczos_resample(coarse, 256, 192)
        pyramid = build_pyramid(crop, tiers)
        cascaded = lanczos_resample(lanczos_resample(pyramid["L"], 128, 96), 64, 48)
        assert np.abs(cascaded.samples - pyramid["S"].samples).max() < 2 / 255


class TestPngIO:
    def test_roundtrip_quantized(self, tmp_path):
        img = Raster(np.random.default_rng(4).uniform(size=(24, 32, 3)))
        path = tmp_path / "x.png"
        save_raster_png(img, path)
        back = load_raster(path)
        assert back.geometry == img.geometry
        assert np.abs(back.samples - img.samples).max() <= 0.5 / 255 + 1e-12

    def test_grayscale_stays_single_channel(self, tmp_path):
        img = Raster(np.random.default_rng(6).uniform(size=(8, 8, 1)))
        path = tmp_path / "g.png"
        save_raster_png(img, path)
        assert load_raster(path).channels == 1

    def test_to_grayscale(self):
        img = Raster(np.random.default_rng(8).uniform(size=(4, 4, 3)))
        gray = to_grayscale(img)
        assert gray.channels == 1
        expected = img.samples @ np.array([0.299, 0.587, 0.114])
        np.testing.assert_allclose(gray.samples[:, :, 0], expected)
