"""scikit-learn style wrappers around the simulator, the matcher and the depth refiner."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .core import ParameterSet, PatternImage, SensorConfig, preset
from .exceptions import ConfigurationError, InputError
from .harness import match_pair
from .noise import ConvPostProcessor
from .optim import AdamState, LossSpec, ReferenceScan, adam_step, calibrate, loss
from .pipeline import simulate

__all__ = ["DepthSensorSimulator", "SoftBlockMatcher", "ConvDepthRefiner"]


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise ConfigurationError(f"{type(est).__name__} is not fitted yet; call fit first")


class DepthSensorSimulator(BaseEstimator):
    """Scenes in, simulated depth maps out.

    ``fit`` calibrates the parameters named in ``fit_params`` against
    reference depth maps of the given scenes; ``predict`` renders and
    block-matches each scene.  Invalid pixels are returned as 0.
    """

    def __init__(self, preset="kinect_v1", config=None, fit_params=("shadow_bias", "noise_std"),
                 iterations=100, lr=1e-3, postprocess="none", seed=0, threads=1, pattern=None):
        self.preset = preset
        self.config = config
        self.fit_params = fit_params
        self.iterations = iterations
        self.lr = lr
        self.postprocess = postprocess
        self.seed = seed
        self.threads = threads
        self.pattern = pattern

    def _setup(self):
        cfg = self.config if self.config is not None else preset(self.preset)
        if not isinstance(cfg, SensorConfig):
            raise ConfigurationError("config must be a SensorConfig")
        pattern = self.pattern if self.pattern is not None else PatternImage.for_sensor(cfg, seed=self.seed)
        return cfg, pattern

    def fit(self, X, y):
        scenes = list(X)
        depths = [np.asarray(d, dtype=float) for d in y]
        if len(scenes) != len(depths) or not scenes:
            raise InputError("fit needs one reference depth map per scene")
        cfg, pattern = self._setup()
        for d in depths:
            if d.shape != (cfg.height, cfg.width):
                raise InputError(f"depth map shape {d.shape} does not match the sensor")
        scans = [ReferenceScan(s, d, d > 0) for s, d in zip(scenes, depths)]
        ps = ParameterSet.from_components(cfg, scenes[0], pattern)
        res = calibrate(cfg, pattern, scans, ps, list(self.fit_params), iterations=self.iterations, lr=self.lr,
                        seed=self.seed, postprocess=self.postprocess, threads=self.threads)
        self.config_ = cfg.replace(**{n: float(res.params[n]) for n in self.fit_params
                                      if n in SensorConfig.__dataclass_fields__})
        self.params_ = res.params
        self.trace_ = res.trace
        self.pattern_ = pattern
        return self

    def predict(self, X):
        if hasattr(self, "config_"):
            cfg, pattern = self.config_, self.pattern_
        else:
            cfg, pattern = self._setup()
        out = []
        for scene in X:
            r = simulate(scene, cfg, pattern, seed=self.seed, threads=self.threads)
            out.append(np.where(r.valid, np.asarray(r.depth), 0.0))
        return np.stack(out)

    def score(self, X, y):
        """Negative mean Huber + Sobel loss between predictions and ``y``."""
        pred = self.predict(X)
        vals = [float(loss(p, np.asarray(t, dtype=float), LossSpec(), p > 0, np.asarray(t) > 0))
                for p, t in zip(pred, y)]
        return -float(np.mean(vals))


class SoftBlockMatcher(BaseEstimator):
    """Rectified pairs ``(left, right)`` in, soft disparities out (NaN where invalid)."""

    def __init__(self, block_size=9, temperature=15.0, min_disparity=0, max_disparity=None,
                 confidence_threshold=0.25):
        self.block_size = block_size
        self.temperature = temperature
        self.min_disparity = min_disparity
        self.max_disparity = max_disparity
        self.confidence_threshold = confidence_threshold

    def fit(self, X=None, y=None):
        if self.block_size < 3 or self.block_size % 2 == 0:
            raise ConfigurationError("block_size must be odd and >= 3")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        self.fitted_ = True
        return self

    def predict(self, X):
        out = []
        for pair in X:
            if len(pair) != 2:
                raise InputError("each sample must be a (left, right) pair")
            dm = match_pair(pair[0], pair[1], max_disparity=self.max_disparity, min_disparity=self.min_disparity,
                            block_size=self.block_size, temperature=self.temperature,
                            confidence_threshold=self.confidence_threshold)
            out.append(np.where(dm.valid, np.asarray(dm.disparity), np.nan))
        return np.stack(out)


class ConvDepthRefiner(BaseEstimator, TransformerMixin):
    """Residual two-layer depth refiner trained by Adam.

    ``X`` has shape (n, H, W, 3) holding (depth, noise-free depth, shadow
    map); ``y`` the (n, H, W) target depth.  Pixels with a zero target or a
    zero input depth are ignored by the loss.
    """

    def __init__(self, iterations=200, lr=1e-3, init_scale=0.0, loss="huber", seed=0):
        self.iterations = iterations
        self.lr = lr
        self.init_scale = init_scale
        self.loss = loss
        self.seed = seed

    @staticmethod
    def _split(X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 4 or X.shape[-1] != 3:
            raise InputError(f"X must have shape (n, H, W, 3), got {X.shape}")
        return X

    def fit(self, X, y):
        X = self._split(X)
        y = np.asarray(y, dtype=float)
        if y.shape != X.shape[:3]:
            raise InputError(f"y must have shape {X.shape[:3]}, got {y.shape}")
        spec = LossSpec({self.loss: 1.0})
        proc = (ConvPostProcessor.random(self.seed, self.init_scale) if self.init_scale > 0
                else ConvPostProcessor())
        weights = proc.parameters()
        state = AdamState(lr=self.lr)
        self.losses_ = []
        for _ in range(self.iterations):
            tape = ad.Tape()
            p = {k: tape.parameter(v, k) for k, v in weights.items()}
            total = 0.0
            for x, t in zip(X, y):
                z = x[..., 0]
                out = z + proc.residual(z, x[..., 1], x[..., 2], p)
                total = total + loss(out, t, spec, z > 0, t > 0)
            total = total / len(X)
            self.losses_.append(float(ad.value(total)))
            grads = ad.backward(tape, total, list(weights))
            adam_step(weights, grads, state)
        self.processor_ = ConvPostProcessor(weights)
        return self

    def transform(self, X):
        _check_fitted(self, "processor_")
        X = self._split(X)
        return np.stack([np.asarray(self.processor_(x[..., 0], x[..., 1], x[..., 2])) for x in X])
