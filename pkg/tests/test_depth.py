import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from world_kit.depth import (AffineDepthTransform, DepthMap, adaptive_compress, apply_affine,
                             estimate_affine_alignment, overlap_mask, sky_depth)
from world_kit.errors import DegenerateAlignment, InvalidArgument, UnderdeterminedError
from world_kit.layering import Layer

from oracles import lstsq_affine, trimmed_ls_bruteforce


def _layer(depth, completed=None):
    H, W = depth.shape
    return Layer("background", 0, np.zeros((H, W, 3)), np.ones((H, W)), DepthMap.from_array(depth),
                 completed=completed)


class TestDepthMap:
    def test_invalid_pixels_zeroed(self):
        d = DepthMap(np.array([[1.0, -2.0, np.nan]]), np.ones((1, 3)))
        np.testing.assert_array_equal(d.validity, [[1, 0, 0]])
        np.testing.assert_array_equal(d.depth, [[1, 0, 0]])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            DepthMap(np.ones((2, 4)), np.ones((4, 2)))


class TestOverlapMask:
    def test_disjoint(self):
        d = np.ones((8, 16))
        d[:, 8:] = 0
        base = np.zeros((8, 16))
        base[:, 8:] = 1
        assert overlap_mask(_layer(d), base, 2.0).sum() == 0

    def test_full(self):
        assert np.all(overlap_mask(_layer(np.ones((8, 16))), np.ones((8, 16)), 0.0) == 1)

    @pytest.mark.parametrize("cu", [64.5, 2.5])
    def test_feathered_disk(self, cu):
        H, W = 64, 128
        v, u = np.mgrid[:H, :W] + 0.5
        du = np.minimum(np.abs(u - cu), W - np.abs(u - cu))
        dist = np.hypot(du, v - 32.5)
        disk = dist <= 5
        m = overlap_mask(_layer(np.ones((H, W)), disk), np.ones((H, W)), 2.0)
        excluded = m == 0
        # a radius-5 pixel disk grown by 2 pixels: inside r=7, covering r<=6.3
        assert np.all(dist[excluded] <= 7.0)
        assert np.all(excluded[dist <= 6.3])

    def test_lattice_mismatch(self):
        with pytest.raises(InvalidArgument):
            overlap_mask(_layer(np.ones((8, 16))), np.ones((4, 8)))


def _pair(x_base, a, b, shape):
    """Depth maps with layer disparity x_l such that a*x_l + b = x_base."""
    x_base = np.asarray(x_base, np.float64)
    x_layer = (x_base - b) / a
    base = np.zeros(shape)
    layer = np.zeros(shape)
    base.flat[:x_base.size] = 1.0 / x_base
    layer.flat[:x_base.size] = 1.0 / x_layer
    return DepthMap.from_array(layer), DepthMap.from_array(base)


class TestAffineAlignment:
    def test_identity(self, rng):
        d = rng.uniform(1, 10, (8, 16))
        t, rep = estimate_affine_alignment(DepthMap.from_array(d), DepthMap.from_array(d), np.ones((8, 16)))
        assert abs(t.a - 1) < 1e-9 and abs(t.b) < 1e-9
        assert rep.inlier_count == 128 and rep.rms_residual < 1e-12

    def test_four_sample_closed_form(self):
        # x_layer = 0.5 x_base + 0.1 on x_base in {0.25, 0.5, 1, 2}
        x_base = np.array([0.25, 0.5, 1.0, 2.0])
        x_layer = 0.5 * x_base + 0.1
        assert lstsq_affine(x_layer, x_base) == pytest.approx((2.0, -0.2), abs=1e-12)
        dl, db = _pair(x_base, 2.0, -0.2, (2, 4))
        ov = np.zeros((2, 4))
        ov.flat[:4] = 1
        t, rep = estimate_affine_alignment(dl, db, ov)
        assert abs(t.a - 2.0) < 1e-9 and abs(t.b + 0.2) < 1e-9
        assert rep.sample_count == 4

    def test_outliers_match_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        n = 128
        x_base = rng.uniform(0.25, 2.0, n)
        dl, db = _pair(x_base, 2.0, -0.2, (8, 16))
        bad = rng.choice(n, n // 10, replace=False)
        corrupted = db.depth.copy()
        corrupted.flat[bad] *= rng.uniform(2.0, 5.0, bad.size)
        db = DepthMap.from_array(corrupted)
        t, rep = estimate_affine_alignment(dl, db, np.ones((8, 16)))
        x = 1.0 / dl.depth.ravel()
        y = 1.0 / db.depth.ravel()
        oracle = trimmed_ls_bruteforce(x, y, keep=n - bad.size)
        assert abs(t.a - oracle[0]) < 1e-6 and abs(t.b - oracle[1]) < 1e-6
        assert abs(t.a - 2.0) < 1e-6 and abs(t.b + 0.2) < 1e-6
        assert rep.inlier_count == n - bad.size

    def test_latitude_weights(self):
        # a noisy sample at the equator outweighs one near the pole
        H, W = 16, 4
        rng = np.random.default_rng(3)
        x_base = rng.uniform(0.2, 1.0, (H, W))
        dl, db = _pair(x_base.ravel(), 1.0, 0.0, (H, W))
        noisy = db.depth.copy()
        noisy += 0.001 * rng.normal(size=(H, W))
        db = DepthMap.from_array(noisy)
        t, _ = estimate_affine_alignment(dl, db, np.ones((H, W)), trims=0)
        lat = math.pi / 2 - math.pi * (np.arange(H) + 0.5) / H
        w = np.repeat(np.cos(lat), W)
        want = lstsq_affine(1 / dl.depth.ravel(), 1 / db.depth.ravel(), w)
        assert (t.a, t.b) == pytest.approx(want, abs=1e-10)

    def test_underdetermined(self):
        d = DepthMap.from_array(np.full((2, 4), 2.0))
        with pytest.raises(UnderdeterminedError):
            estimate_affine_alignment(d, d, np.ones((2, 4)))
        one = np.zeros((2, 4))
        one[0, 0] = 1
        with pytest.raises(UnderdeterminedError):
            estimate_affine_alignment(d, d, one)

    def test_negative_scale(self):
        x = np.array([0.2, 0.4, 0.6, 0.8])
        dl, db = _pair(x, -1.0, 1.5, (1, 4))
        with pytest.raises(DegenerateAlignment):
            estimate_affine_alignment(dl, db, np.ones((1, 4)))

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.2, 5.0), st.floats(-0.1, 0.1), st.integers(0, 2**31 - 1))
    def test_noise_free_recovery(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x_base = rng.uniform(0.3, 2.0, 32)
        dl, db = _pair(x_base, a, b, (4, 8))
        if not dl.valid.all():
            return
        t, _ = estimate_affine_alignment(dl, db, np.ones((4, 8)))
        assert abs(t.a - a) < 1e-9 and abs(t.b - b) < 1e-9

    def test_report_json(self):
        d = DepthMap.from_array(np.arange(1.0, 9.0).reshape(2, 4))
        _, rep = estimate_affine_alignment(d, d, np.ones((2, 4)))
        assert '"inlier_count": 8' in rep.to_json()


class TestApplyAffine:
    def test_identity(self):
        d = DepthMap.from_array(np.array([[1.0, 2.0, 0.0]]))
        out = apply_affine(d, AffineDepthTransform())
        np.testing.assert_array_equal(out.depth, d.depth)

    def test_scale_halves_depth(self):
        out = apply_affine(DepthMap.from_array(np.array([[2.0, 8.0]])), AffineDepthTransform(2.0, 0.0))
        np.testing.assert_allclose(out.depth, [[1.0, 4.0]])

    def test_pole_invalidates(self):
        d = DepthMap.from_array(np.array([[4.0, 2.0]]))
        out = apply_affine(d, AffineDepthTransform(1.0, -0.25))
        assert not out.valid[0, 0] and out.valid[0, 1]
        assert out.depth[0, 1] == pytest.approx(4.0)


class TestSkyDepth:
    def test_examples(self):
        assert sky_depth([DepthMap.from_array(np.array([[3.0, 10.0]]))], 1.05) == pytest.approx(10.5)
        assert sky_depth([DepthMap.from_array(np.array([[3.0]]))]) == pytest.approx(3.15)

    def test_ignores_missing(self):
        assert sky_depth([None, DepthMap.from_array(np.array([[2.0]]))], 1.5) == pytest.approx(3.0)

    def test_kappa_must_exceed_one(self):
        with pytest.raises(InvalidArgument):
            sky_depth([DepthMap.from_array(np.ones((1, 1)))], 1.0)


class TestAdaptiveCompress:
    def test_below_knee_identity(self):
        d = DepthMap.from_array(np.linspace(1, 5, 100).reshape(10, 10))
        out = adaptive_compress(d, 99.0)
        knee = np.percentile(d.depth, 99.0)
        keep = d.depth <= knee
        np.testing.assert_array_equal(out.depth[keep], d.depth[keep])

    def test_knee_continuity_and_log_example(self):
        # 99 samples at 10 then one far sample: the 90th percentile knee is 10
        vals = np.full(100, 10.0)
        vals[-1] = 10.0 * math.e
        out = adaptive_compress(DepthMap.from_array(vals.reshape(10, 10)), q=90.0, slope=1.0)
        assert out.depth.flat[0] == 10.0
        assert out.depth.flat[-1] == pytest.approx(20.0, abs=1e-12)

    def test_monotone(self, rng):
        d = DepthMap.from_array(np.sort(rng.uniform(1, 100, 400)).reshape(20, 20))
        out = adaptive_compress(d, 80.0, 0.5)
        assert np.all(np.diff(out.depth.ravel()) >= 0)

    def test_arguments(self):
        d = DepthMap.from_array(np.ones((2, 2)))
        with pytest.raises(InvalidArgument):
            adaptive_compress(d, 100.0)
        with pytest.raises(InvalidArgument):
            adaptive_compress(d, 99.0, 0.0)
