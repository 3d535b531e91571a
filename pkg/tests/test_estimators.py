"""scikit-learn style wrappers."""
import numpy as np
import pytest
from sklearn.base import clone

from depthsim import ConvDepthRefiner, DepthSensorSimulator, PatternImage, Scene, SoftBlockMatcher
from depthsim.exceptions import ConfigurationError, InputError


class TestDepthSensorSimulator:
    def test_params(self, small_cfg):
        est = DepthSensorSimulator(config=small_cfg, iterations=3)
        assert est.get_params()["iterations"] == 3
        assert clone(est).get_params()["config"] == small_cfg

    def test_predict_and_fit(self, small_cfg):
        cfg = small_cfg.replace(noise_std=0.02)
        scenes = [Scene.plane_scene(1000.0, 10.0)]
        truth = DepthSensorSimulator(config=cfg).predict(scenes)
        assert truth.shape == (1, cfg.height, cfg.width)
        assert (truth > 0).mean() > 0.3
        est = DepthSensorSimulator(config=cfg.replace(noise_std=0.1), iterations=3, lr=0.01)
        est.fit(scenes, truth)
        assert len(est.trace_.rows) == 4
        assert est.score(scenes, truth) <= 0.0
        assert DepthSensorSimulator(config=cfg).score(scenes, truth) == 0.0

    def test_shape_check(self, small_cfg):
        with pytest.raises(InputError):
            DepthSensorSimulator(config=small_cfg).fit([Scene.plane_scene(1000.0)], [np.zeros((3, 3))])


class TestSoftBlockMatcher:
    def test_pairs(self, rng):
        right = rng.random((24, 48))
        pairs = [(np.roll(right, 3, axis=1), right), (np.roll(right, 6, axis=1), right)]
        d = SoftBlockMatcher(block_size=7, temperature=50.0, max_disparity=10).fit().predict(pairs)
        assert np.nanmedian(d[0]) == pytest.approx(3.0, abs=0.05)
        assert np.nanmedian(d[1]) == pytest.approx(6.0, abs=0.05)
        assert np.isnan(d[0, 0, 0])

    def test_bad_block(self):
        with pytest.raises(ConfigurationError):
            SoftBlockMatcher(block_size=4).fit()


class TestConvDepthRefiner:
    def test_learns_offset(self, rng):
        z = rng.uniform(900, 1100, (2, 12, 12))
        X = np.stack([z, z, np.ones_like(z)], axis=-1)
        y = z + 5.0
        ref = ConvDepthRefiner(iterations=60, lr=1e-3, loss="l1").fit(X, y)
        assert ref.losses_[-1] < ref.losses_[0]
        assert ref.transform(X).shape == z.shape

    def test_identity_before_training(self, rng):
        z = rng.uniform(900, 1100, (1, 8, 8))
        X = np.stack([z, z, np.ones_like(z)], axis=-1)
        ref = ConvDepthRefiner(iterations=0).fit(X, z)
        np.testing.assert_array_equal(ref.transform(X), z)

    def test_not_fitted(self):
        with pytest.raises(ConfigurationError):
            ConvDepthRefiner().transform(np.zeros((1, 8, 8, 3)))

    def test_bad_input(self):
        with pytest.raises(InputError):
            ConvDepthRefiner(iterations=1).fit(np.zeros((8, 8, 3)), np.zeros((8, 8)))
