"""Capture noise and depth post-processing.

Random draws come from a counter-based generator keyed by (seed, stream),
and the whole field is drawn at once in pixel order, so results never
depend on how work is split across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, InputError
from .io import read_weights, write_weights

__all__ = ["NoiseParams", "standard_normal_field", "apply_capture_noise", "ConvPostProcessor",
           "postprocess_depth", "POSTPROCESS_MODES", "DEPTH_SCALE"]

POSTPROCESS_MODES = ("none", "gaussian", "conv2")
# depth inputs/outputs of the network are expressed in metres
DEPTH_SCALE = 1000.0

CAPTURE_STREAM = 0
DEPTH_STREAM = 1


@dataclass(frozen=True)
class NoiseParams:
    mean: float = 0.0
    std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.std < 0:
            raise ConfigurationError("noise std must be >= 0")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigurationError("seed must be an unsigned 64-bit integer")


def standard_normal_field(shape, seed: int, stream: int = CAPTURE_STREAM) -> np.ndarray:
    """i.i.d. N(0, 1) draws, reproducible from (seed, stream)."""
    bitgen = np.random.Philox(np.random.SeedSequence([int(seed), int(stream)]))
    return np.random.Generator(bitgen).standard_normal(shape)


def apply_capture_noise(intensity, mean=0.0, std=0.0, seed: int = 0, stream: int = CAPTURE_STREAM):
    """``I + eps * std + mean`` with eps fixed by the seed (reparameterized).

    ``mean`` and ``std`` may be tape variables; eps is a constant, so the
    gradient with respect to ``std`` is eps at every pixel.
    """
    if np.any(ad.value(std) < 0):
        raise ConfigurationError("noise std must be >= 0")
    if not ad.is_var(std) and not ad.is_var(mean) and float(std) == 0.0 and float(mean) == 0.0:
        return intensity
    eps = standard_normal_field(ad.value(intensity).shape, seed, stream)
    return intensity + eps * std + mean


class ConvPostProcessor:
    """Two-layer residual depth refiner.

    Input is the 3-channel stack (depth, noise-free depth, shadow map) with
    depths in metres; a 5x5 convolution with 32 filters and a rectifier is
    followed by a 1x1 convolution to one channel whose output (metres) is
    added to the depth.  Zero weights give the identity.
    """

    shapes = {"conv_w1": (32, 3, 5, 5), "conv_b1": (32,), "conv_w2": (1, 32, 1, 1), "conv_b2": (1,)}

    def __init__(self, weights: dict | None = None):
        if weights is None:
            weights = {k: np.zeros(s) for k, s in self.shapes.items()}
        missing = set(self.shapes) - set(weights)
        if missing:
            raise ConfigurationError(f"missing conv weights: {sorted(missing)}")
        self.weights = {}
        for k, s in self.shapes.items():
            w = np.array(weights[k], dtype=float)
            if w.shape != s:
                raise ConfigurationError(f"{k} has shape {w.shape}, expected {s}")
            if not np.all(np.isfinite(w)):
                raise ConfigurationError(f"{k} contains non-finite values")
            self.weights[k] = w

    @classmethod
    def random(cls, seed: int = 0, scale: float = 0.05) -> ConvPostProcessor:
        rng = np.random.default_rng(seed)
        return cls({k: rng.normal(0.0, scale, s) for k, s in cls.shapes.items()})

    @property
    def n_parameters(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes.values()))

    def parameters(self) -> dict:
        return dict(self.weights)

    def residual(self, depth, gt_depth, shadow, params: dict | None = None):
        """Network output in millimetres for (H, W) inputs."""
        p = {k: (params[k] if params is not None and k in params else v) for k, v in self.weights.items()}
        h, w = ad.value(depth).shape
        x = ad.stack([depth / DEPTH_SCALE, gt_depth / DEPTH_SCALE, shadow], axis=-1)
        cols = ad.im2col(x, 5)                                       # HW x 75
        w1 = ad.reshape(p["conv_w1"], (32, 75))
        hidden = ad.relu(ad.matmul(cols, ad.transpose(w1, (1, 0))) + p["conv_b1"])
        out = ad.matmul(hidden, ad.reshape(p["conv_w2"], (32, 1))) + p["conv_b2"]
        return ad.reshape(out, (h, w)) * DEPTH_SCALE

    def __call__(self, depth, gt_depth, shadow, params: dict | None = None):
        return depth + self.residual(depth, gt_depth, shadow, params)

    def save(self, path) -> None:
        write_weights(path, self.weights)

    @classmethod
    def load(cls, path) -> ConvPostProcessor:
        return cls(read_weights(path))


def postprocess_depth(depth, gt_depth, shadow, mode: str = "none", *, params: dict | None = None,
                      processor: ConvPostProcessor | None = None, valid: np.ndarray | None = None,
                      seed: int = 0):
    """Optional depth refinement: identity, additive Gaussian noise, or the residual network.

    Gaussian mode reads ``depth_noise_mean``/``depth_noise_std`` (mm) from
    ``params``; invalid pixels are zeroed before entering the network.
    """
    if mode not in POSTPROCESS_MODES:
        raise ConfigurationError(f"unknown post-processing mode {mode!r}; choose from {POSTPROCESS_MODES}")
    if ad.value(depth).shape != ad.value(gt_depth).shape or ad.value(depth).shape != ad.value(shadow).shape:
        raise InputError("depth, gt_depth and shadow map must share a shape")
    if mode == "none":
        return depth
    if mode == "gaussian":
        params = params or {}
        if "depth_noise_std" not in params:
            raise ConfigurationError("gaussian post-processing needs depth_noise_std")
        return apply_capture_noise(depth, params.get("depth_noise_mean", 0.0), params["depth_noise_std"],
                                   seed, DEPTH_STREAM)
    if processor is None:
        if params is None or not all(k in params for k in ConvPostProcessor.shapes):
            raise ConfigurationError("conv2 post-processing needs network weights")
        processor = ConvPostProcessor({k: ad.value(params[k]) for k in ConvPostProcessor.shapes})
    z_in = depth if valid is None else ad.where(valid, depth, 0.0)
    return depth + processor.residual(z_in, gt_depth, shadow, params)
