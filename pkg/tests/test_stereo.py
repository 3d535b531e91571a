"""ZNCC cost volumes, soft disparity reduction and strip-parallel matching."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthsim import (PatternImage, Scene, block_match, cost_volume, render_capture,
                      render_reference_patterns, soft_disparity, strip_split_match)
from depthsim.exceptions import ConfigurationError, ContractError, InputError
from depthsim.render import ReferencePatterns
from depthsim.stereo import match_images, zncc_volume


class TestCostVolume:
    def test_self_match_scores_one(self, small_cfg, rng):
        img = 100 * rng.random((40, 96))
        cv = cost_volume(img, img, small_cfg, (0, 4))
        np.testing.assert_allclose(cv.scores[cv.valid][:, 0], 1.0, atol=1e-8)

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_shift_peak(self, small_cfg, rng, k):
        ref = 100 * rng.random((40, 96))
        cap = np.roll(ref, k, axis=1)
        cv = cost_volume(cap, ref, small_cfg, (0, 8))
        np.testing.assert_allclose(cv.scores[cv.valid][:, k], 1.0, atol=1e-8)
        assert np.all(np.argmax(cv.scores[cv.valid], axis=1) == k)

    def test_zero_variance_block(self):
        flat = np.full((9, 9), 0.4)
        v = zncc_volume(flat, flat, [0], 1)
        np.testing.assert_allclose(v, 0.0, atol=1e-9)

    def test_labels_interlaced(self, small_cfg, small_pattern):
        refs = render_reference_patterns(small_cfg, small_pattern)
        cap = render_capture(Scene.plane_scene(1000.0), small_cfg, small_pattern).intensity
        cv = cost_volume(cap, refs, small_cfg, (40, 45))
        np.testing.assert_allclose(cv.labels, 40 + np.arange(12) / 2)

    def test_size_mismatch(self, small_cfg, rng):
        with pytest.raises(InputError):
            cost_volume(rng.random((40, 96)), rng.random((40, 90)), small_cfg, (0, 4))

    def test_range_wider_than_image(self, small_cfg, rng):
        img = rng.random((40, 96))
        with pytest.raises(ConfigurationError):
            cost_volume(img, img, small_cfg, (0, 200))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance(self, a, c):
        rng = np.random.default_rng(7)
        left, right = 100 * rng.random((12, 20)), 100 * rng.random((12, 20))
        v1 = zncc_volume(left, right, [0, 2], 2)
        v2 = zncc_volume(a * left + c, right, [0, 2], 2)
        np.testing.assert_allclose(v1, v2, atol=1e-5)


class TestSoftDisparity:
    def test_peak_in_middle(self):
        assert float(soft_disparity(np.array([0.0, 10.0, 0.0]), [0, 1, 2], 1.0)) == pytest.approx(1.0, abs=1e-4)

    def test_tie(self):
        d = soft_disparity(np.array([3.0, 3.0, -np.inf, -np.inf]), [0, 1, 2, 3], 2.0)
        assert float(d) == pytest.approx(0.5)

    def test_large_beta_is_argmax(self):
        s = np.array([0.1, 0.7, 0.65, 0.2])
        assert float(soft_disparity(s, [5, 6, 7, 8], 1e5)) == pytest.approx(6.0)

    def test_no_overflow(self):
        assert np.isfinite(soft_disparity(np.array([1e4, 0.0]), [0, 1], 50.0))

    def test_bad_temperature(self):
        with pytest.raises(ConfigurationError):
            soft_disparity(np.zeros(3), [0, 1, 2], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=8), st.floats(0.1, 100))
    def test_within_label_hull(self, scores, beta):
        labels = np.arange(len(scores), dtype=float) + 3
        d = float(soft_disparity(np.array(scores), labels, beta))
        assert labels[0] - 1e-12 <= d <= labels[-1] + 1e-12


class TestBlockMatch:
    def test_frontal_plane_recovered(self, small_cfg, small_pattern):
        z = small_cfg.fb / 50
        refs = render_reference_patterns(small_cfg, small_pattern)
        cap = render_capture(Scene.plane_scene(z), small_cfg, small_pattern).intensity
        dm = block_match(cap, refs, small_cfg)
        step = z * z / small_cfg.fb
        assert dm.valid.sum() > 100
        assert abs(np.median(dm.depth[dm.valid]) - z) < step

    def test_depth_at_max_disparity(self, kinect):
        assert kinect.fb / 107 == pytest.approx(401.22, abs=0.01)

    def test_reference_count_contract(self, small_cfg, small_pattern):
        refs = render_reference_patterns(small_cfg, small_pattern)
        bad = ReferencePatterns(refs.images[:1], refs.base_disparity, 1)
        with pytest.raises(ContractError):
            block_match(refs.images[0], bad, small_cfg)

    def test_beyond_range_is_low_confidence(self, small_cfg, small_pattern):
        refs = render_reference_patterns(small_cfg, small_pattern)
        far = render_capture(Scene.plane_scene(5000.0), small_cfg, small_pattern).intensity
        near = render_capture(Scene.plane_scene(1000.0), small_cfg, small_pattern).intensity
        c_far = block_match(far, refs, small_cfg).confidence
        c_near = block_match(near, refs, small_cfg).confidence
        inner = c_near > 0
        assert np.median(c_near[inner]) > 0.9
        assert np.median(c_far[inner]) < 0.5

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1.0, 500.0))
    def test_depth_disparity_round_trip(self, d):
        fb = 572.41 * 75.0
        z = fb / d
        assert fb / z == pytest.approx(d, rel=1e-9)
        assert fb / (d + 1e-3) < z


class TestStrips:
    def _inputs(self, kinect, size=64):
        cfg = kinect.replace(width=size * 2, height=size, z_min=700.0, z_max=1400.0)
        pat = PatternImage.for_sensor(cfg, seed=2)
        refs = render_reference_patterns(cfg, pat)
        cap = render_capture(Scene.plane_scene(1000.0, 15.0), cfg, pat).intensity
        return cfg, refs, cap

    def test_strips_are_bitwise_equal(self, kinect):
        cfg, refs, cap = self._inputs(kinect)
        ref = block_match(cap, refs, cfg)
        for m, threads in [(1, 1), (2, 1), (3, 2)]:
            dm = strip_split_match(cap, refs, cfg, m, threads)
            assert dm.disparity.tobytes() == ref.disparity.tobytes()
            np.testing.assert_array_equal(dm.valid, ref.valid)

    def test_strips_too_thin(self, kinect):
        cfg, refs, cap = self._inputs(kinect)
        with pytest.raises(ConfigurationError):
            strip_split_match(cap, refs, cfg, m=64 // (2 * cfg.block_size) + 1)


class TestGenericPairs:
    def test_known_shift(self, rng):
        right = rng.random((32, 64))
        left = np.roll(right, 6, axis=1)
        dm = match_images(left, right, (0, 12), 7, 50.0)
        np.testing.assert_allclose(dm.disparity[dm.valid], 6.0, atol=0.05)
        assert dm.valid.sum() > 300
