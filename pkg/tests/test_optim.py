"""Losses, Adam and the optimization workflows on small scenes."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthsim import (LossSpec, ParameterSet, PatternImage, ReferenceScan, Scene, calibrate, loss,
                      optimize_pattern, optimize_scene_pose, simulate)
from depthsim.exceptions import ConfigurationError, ContractError, InputError, NumericalError
from depthsim.optim import AdamState, Trace, adam_step, huber, sobel


class TestLosses:
    @pytest.mark.parametrize("kind", ["l1", "huber", "sobel_gradient"])
    def test_zero_on_agreement(self, kind, rng):
        z = rng.uniform(500, 1500, (10, 10))
        assert float(loss(z, z, LossSpec({kind: 1.0}))) == 0.0

    def test_huber_values(self):
        np.testing.assert_allclose(huber(np.array([0.5, 2.0, -2.0]), 1.0), [0.125, 1.5, 1.5])

    def test_sobel_ignores_offset(self, rng):
        z = rng.uniform(500, 1500, (10, 10))
        assert float(loss(z + 37.0, z, LossSpec({"sobel_gradient": 1.0}))) == pytest.approx(0.0, abs=1e-10)

    def test_sobel_of_ramp(self):
        z = np.tile(np.arange(6.0) * 2, (5, 1))
        gx, gy = sobel(z)
        np.testing.assert_allclose(gx, 16.0)
        np.testing.assert_allclose(gy, 0.0)

    def test_mask_excludes_pixels(self):
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        b[0, 0] = 100.0
        valid = np.ones((4, 4), bool)
        valid[0, 0] = False
        assert float(loss(a, b, LossSpec.l1(), valid)) == 0.0

    def test_no_valid_pixels(self):
        with pytest.raises(ContractError):
            loss(np.zeros((3, 3)), np.zeros((3, 3)), LossSpec.l1(), np.zeros((3, 3), bool))

    def test_bad_spec(self):
        with pytest.raises(ConfigurationError):
            LossSpec({"l2": 1.0})
        with pytest.raises(ConfigurationError):
            LossSpec({"l1": 0.0})

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            loss(np.zeros((3, 3)), np.zeros((3, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=9, max_size=9), st.floats(0.1, 20))
    def test_non_negative(self, e, tau):
        z = np.array(e).reshape(3, 3)
        assert float(loss(z, np.zeros((3, 3)), LossSpec({"huber": 1.0, "l1": 0.5}, tau))) >= 0.0


class TestAdam:
    def test_zero_gradient(self):
        p = {"a": np.array([1.0, -2.0])}
        adam_step(p, {"a": np.zeros(2)}, AdamState(lr=0.1))
        np.testing.assert_array_equal(p["a"], [1.0, -2.0])

    def test_first_step_is_sign(self):
        lr = 1e-3
        g = np.array([3.0, -1e-2, 250.0])
        p = adam_step({"a": np.zeros(3)}, {"a": g}, AdamState(lr=lr))
        np.testing.assert_allclose(p["a"], -lr * np.sign(g), rtol=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), st.floats(0.01, 100))
    def test_scale_invariant_direction(self, g, c):
        a = adam_step({"p": np.array(0.0)}, {"p": np.array(g)}, AdamState(lr=0.01))["p"]
        b = adam_step({"p": np.array(0.0)}, {"p": np.array(c * g)}, AdamState(lr=0.01))["p"]
        assert np.sign(a) == np.sign(b) == -np.sign(g)

    def test_constant_gradient_moves_monotonically(self):
        p, st_ = {"a": np.array(0.0)}, AdamState(lr=0.01)
        xs = [float(adam_step(p, {"a": np.array(2.0)}, st_)["a"]) for _ in range(5)]
        assert all(b < a for a, b in zip([0.0] + xs, xs))

    def test_per_parameter_rates_and_decay(self):
        st_ = AdamState(lr={"a": 1.0, "b": 0.01}, lr_decay=0.5)
        p = {"a": np.array(0.0), "b": np.array(0.0)}
        adam_step(p, {"a": np.array(1.0), "b": np.array(1.0)}, st_)
        assert (float(p["a"]), float(p["b"])) == pytest.approx((-1.0, -0.01), rel=1e-6)
        assert st_.rate("a") == 1.0
        st_.step = 3
        assert st_.rate("a") == 0.25

    def test_non_finite_gradient(self):
        with pytest.raises(NumericalError):
            adam_step({"a": np.zeros(2)}, {"a": np.array([np.nan, 0.0])}, AdamState())

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState())

    def test_bad_decay(self):
        with pytest.raises(ConfigurationError):
            AdamState(lr_decay=0.0)


class TestTrace:
    def test_csv(self, tmp_path):
        tr = Trace(["x", "v"])
        tr.add(0, 2.0, {"x": 1.5, "v": [1.0, 2.0]})
        tr.add(1, 1.0, {"x": 1.25, "v": [0.5, 2.0]})
        tr.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss,x,v[0],v[1]"
        assert lines[2] == "1,1.0,1.25,0.5,2.0"
        np.testing.assert_array_equal(tr.best_so_far(), [2.0, 1.0])


@pytest.fixture
def calib_setup(small_cfg, small_pattern):
    cfg = small_cfg.replace(noise_std=0.02)
    scene = Scene.plane_scene(1000.0, 10.0)
    r = simulate(scene, cfg, small_pattern, seed=0)
    scan = ReferenceScan(scene, np.asarray(r.depth), r.valid)
    return cfg, scene, scan


class TestCalibrate:
    def test_zero_iterations(self, calib_setup, small_pattern):
        cfg, scene, scan = calib_setup
        ps = ParameterSet.from_components(cfg, scene, small_pattern)
        res = calibrate(cfg, small_pattern, [scan], ps, ["noise_std"], iterations=0)
        assert len(res.trace.rows) == 1 and res.best_iteration == 0

    def test_truth_is_a_fixed_point(self, calib_setup, small_pattern):
        cfg, scene, scan = calib_setup
        ps = ParameterSet.from_components(cfg, scene, small_pattern)
        res = calibrate(cfg, small_pattern, [scan], ps, ["noise_std", "shadow_bias"], iterations=3, lr=1e-3)
        assert res.trace.losses[0] == 0.0
        assert np.all(np.diff(res.trace.best_so_far()) <= 0)
        assert float(res.params["noise_std"]) == 0.02

    def test_unknown_parameter(self, calib_setup, small_pattern):
        cfg, scene, scan = calib_setup
        ps = ParameterSet.from_components(cfg, scene, small_pattern)
        with pytest.raises(ConfigurationError):
            calibrate(cfg, small_pattern, [scan], ps, ["conv_w1"], iterations=1)

    def test_needs_scans(self, small_cfg, small_pattern):
        with pytest.raises(InputError):
            calibrate(small_cfg, small_pattern, [], ParameterSet.from_components(small_cfg), ["noise_std"])

    def test_moves_towards_truth(self, calib_setup, small_pattern):
        cfg, scene, scan = calib_setup
        ps = ParameterSet.from_components(cfg.replace(noise_std=0.2), scene, small_pattern)
        res = calibrate(cfg, small_pattern, [scan], ps, ["noise_std"], iterations=8, lr=0.02)
        assert res.trace.best_so_far()[-1] < res.trace.losses[0]
        assert abs(float(res.params["noise_std"]) - 0.02) < 0.18


class TestWorkflows:
    def test_pose_reduces_tilt(self, kinect):
        cfg = kinect.replace(width=64, height=64, z_min=700.0, z_max=1400.0, noise_std=1.0)
        pat = PatternImage.for_sensor(cfg, seed=0)
        res = optimize_scene_pose(Scene.plane_scene(1000.0, 30.0), cfg, pat, iterations=5, lr=0.01)
        assert len(res.tilt_deg) == 6
        assert res.tilt_deg[-1] < res.tilt_deg[0]

    def test_pose_needs_plane(self, small_cfg, small_pattern):
        with pytest.raises(InputError):
            optimize_scene_pose(Scene(), small_cfg, small_pattern, iterations=1)

    def test_pattern_optimization_step(self, small_cfg):
        cfg = small_cfg.replace(noise_std=0.3)
        pat = PatternImage.for_sensor(cfg, channels=3, level=0.5)
        scene = Scene.plane_scene(1000.0, albedo=(1.0, 0.0, 0.0))
        res = optimize_pattern(scene, cfg, pat, iterations=3)
        # green and blue only move through the white reference plane; the capture never sees them
        cap = simulate(scene, cfg, res.pattern).capture.intensity
        assert np.all(cap[..., 1:] == 0.0)
        assert not np.array_equal(res.pattern.values[..., 0], pat.values[..., 0])
        assert res.energy.shape == (4, 3)
        assert np.all(res.pattern.values >= 0) and np.all(res.pattern.values <= 1)

    def test_pattern_single_channel(self, small_cfg, small_pattern):
        res = optimize_pattern(Scene.plane_scene(1000.0), small_cfg.replace(noise_std=0.1), small_pattern,
                               iterations=2)
        assert res.pattern.channels == 1
