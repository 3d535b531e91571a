"""Capture noise and depth post-processing."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthsim import ConvPostProcessor, apply_capture_noise, postprocess_depth
from depthsim import autodiff as ad
from depthsim.exceptions import ConfigurationError, InputError
from depthsim.noise import standard_normal_field


class TestCaptureNoise:
    def test_identity_without_noise(self, rng):
        img = rng.random((8, 8))
        assert apply_capture_noise(img) is img

    def test_constant_offset(self, rng):
        img = rng.random((8, 8))
        np.testing.assert_allclose(apply_capture_noise(img, mean=0.1), img + 0.1, atol=1e-15)

    def test_sample_mean(self):
        out = apply_capture_noise(np.zeros((64, 64)), mean=0.3, std=1.0, seed=11)
        assert abs(out.mean() - 0.3) < 4 / np.sqrt(4096)

    def test_reproducible(self):
        a = apply_capture_noise(np.zeros((16, 16)), std=0.5, seed=9)
        b = apply_capture_noise(np.zeros((16, 16)), std=0.5, seed=9)
        assert a.tobytes() == b.tobytes()

    def test_streams_differ(self):
        assert not np.array_equal(standard_normal_field((4, 4), 1, 0), standard_normal_field((4, 4), 1, 1))

    def test_negative_std(self):
        with pytest.raises(ConfigurationError):
            apply_capture_noise(np.zeros((4, 4)), std=-0.1)

    def test_gradient_wrt_std_is_the_draw(self):
        tape = ad.Tape()
        s = tape.parameter(np.array(0.2), "s")
        out = apply_capture_noise(np.zeros((5, 5)), std=s, seed=4)
        g = ad.backward(tape, ad.sum(out), ["s"])["s"]
        assert float(g) == pytest.approx(standard_normal_field((5, 5), 4).sum())


class TestPostprocess:
    def test_none_is_identity(self, rng):
        z = rng.random((6, 6))
        assert postprocess_depth(z, z, z, "none") is z

    def test_unknown_mode(self, rng):
        z = rng.random((6, 6))
        with pytest.raises(ConfigurationError):
            postprocess_depth(z, z, z, "median")

    def test_shape_mismatch(self, rng):
        with pytest.raises(InputError):
            postprocess_depth(rng.random((6, 6)), rng.random((6, 5)), rng.random((6, 6)), "none")

    def test_gaussian_needs_std(self, rng):
        z = rng.random((6, 6))
        with pytest.raises(ConfigurationError):
            postprocess_depth(z, z, z, "gaussian")

    def test_gaussian_mode(self):
        z = np.full((64, 64), 1000.0)
        out = postprocess_depth(z, z, np.ones_like(z), "gaussian",
                                params={"depth_noise_mean": 2.0, "depth_noise_std": 3.0}, seed=5)
        assert abs(out.mean() - 1002.0) < 4 * 3.0 / 64
        assert np.std(out) == pytest.approx(3.0, rel=0.05)

    def test_conv2_needs_weights(self, rng):
        z = rng.random((6, 6))
        with pytest.raises(ConfigurationError):
            postprocess_depth(z, z, z, "conv2")


class TestConvPostProcessor:
    def test_parameter_count(self):
        assert ConvPostProcessor().n_parameters == 3 * 32 * 25 + 32 + 32 + 1 == 2465

    def test_zero_weights_identity(self, rng):
        z = rng.uniform(500, 2000, (10, 12))
        out = postprocess_depth(z, z + 1, np.ones_like(z), "conv2", processor=ConvPostProcessor())
        np.testing.assert_array_equal(out, z)

    def test_bad_weight_shape(self):
        w = ConvPostProcessor().parameters()
        w["conv_b1"] = np.zeros(31)
        with pytest.raises(ConfigurationError):
            ConvPostProcessor(w)

    def test_save_load(self, tmp_path):
        p = ConvPostProcessor.random(seed=3)
        p.save(tmp_path / "w.dscv")
        q = ConvPostProcessor.load(tmp_path / "w.dscv")
        for k in p.weights:
            assert q.weights[k].tobytes() == p.weights[k].tobytes()

    def test_weight_gradient_matches_finite_differences(self, rng):
        proc = ConvPostProcessor.random(seed=1, scale=0.1)
        z = rng.uniform(900, 1100, (8, 8))
        gt, sh = z + rng.normal(0, 5, z.shape), rng.random(z.shape)

        def f(w):
            p = dict(proc.weights, conv_w1=w)
            return ad.sum(proc(z, gt, sh, p) ** 2) / 1e6
        for idx in [(0, 0, 0, 0), (5, 1, 2, 3), (31, 2, 4, 4)]:
            assert ad.finite_diff_check(f, proc.weights["conv_w1"], 1e-6, idx) < 1e-4

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 3))
    def test_translation_equivariance(self, dy, dx):
        rng = np.random.default_rng(8)
        proc = ConvPostProcessor.random(seed=2, scale=0.3)
        big = [rng.uniform(800, 1200, (20, 20)), rng.uniform(800, 1200, (20, 20)), rng.random((20, 20))]
        full = proc.residual(*big)
        crop = proc.residual(*[b[dy:dy + 14, dx:dx + 14] for b in big])
        # same-padding band of width 2 excluded
        np.testing.assert_allclose(crop[2:-2, 2:-2], full[dy + 2:dy + 12, dx + 2:dx + 12], rtol=1e-12)
