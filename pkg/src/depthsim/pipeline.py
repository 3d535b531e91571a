"""End-to-end simulation: scene and sensor parameters to a depth map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import ParameterSet, PatternImage, Scene, SensorConfig, disparity_range
from .noise import ConvPostProcessor, apply_capture_noise, postprocess_depth
from .render import CaptureImage, ReferencePatterns, render_capture, render_reference_patterns
from .stereo import DepthMap, strip_split_match

__all__ = ["SimulationResult", "simulate", "scene_disparity_range", "REFERENCE_PARAMETERS"]

# parameters that change the rendered reference patterns
REFERENCE_PARAMETERS = ("pattern", "shadow_bias", "shadow_steepness", "emitter_intensity")


@dataclass
class SimulationResult:
    capture: CaptureImage      # noise-free render with ground-truth buffers
    intensity: object          # capture after the noise model
    depth_map: DepthMap        # block-matching output before post-processing
    depth: object              # final depth (mm)
    valid: np.ndarray
    d_range: tuple


def scene_disparity_range(cfg: SensorConfig, capture: CaptureImage, pad: int = 1) -> tuple[int, int]:
    """Search range from the z-buffer extent, widened by ``pad`` labels each side.

    Falls back to the full sensor range when nothing is hit.
    """
    gt = np.asarray(ad.value(capture.gt_depth))
    hit = capture.hit_mask & (gt > 0)
    lo_b, hi_b = cfg.disparity_bounds
    if not hit.any():
        return lo_b, hi_b
    d_lo, d_hi = disparity_range(cfg, (gt[hit].min(), gt[hit].max()))
    return max(lo_b, d_lo - pad), min(hi_b, d_hi + pad)


def simulate(scene: Scene, cfg: SensorConfig, pattern: PatternImage, params: dict | ParameterSet | None = None,
             *, seed: int = 0, postprocess: str = "none", processor: ConvPostProcessor | None = None,
             d_range=None, strips: int = 1, threads: int = 1,
             references: ReferencePatterns | None = None) -> SimulationResult:
    """Render, add capture noise, block-match and optionally post-process.

    ``params`` is a bound parameter mapping (see :meth:`ParameterSet.bind`);
    tape variables in it make the corresponding outputs differentiable.
    Precomputed ``references`` are reused unless the pattern or a shading
    parameter is a tape variable, in which case they are re-rendered so
    gradients flow through them.
    """
    if params is None:
        params = ParameterSet.from_components(cfg, scene, pattern, processor).bind()
    elif isinstance(params, ParameterSet):
        params = params.bind()
    capture = render_capture(scene, cfg, pattern, params, threads=threads)
    intensity = apply_capture_noise(capture.intensity, params.get("noise_mean", cfg.noise_mean),
                                    params.get("noise_std", cfg.noise_std), seed)
    shading_vars = any(ad.is_var(params.get(k)) for k in REFERENCE_PARAMETERS)
    if references is None or shading_vars:
        references = render_reference_patterns(cfg, pattern, params)
    if d_range is None:
        d_range = scene_disparity_range(cfg, capture)
    d_range = (max(int(d_range[0]), references.base_disparity), int(d_range[1]))
    dm = strip_split_match(intensity, references, cfg, strips, threads, d_range, params)
    depth = postprocess_depth(dm.depth, capture.gt_depth, capture.shadow_map, postprocess,
                              params=params, processor=processor, valid=dm.valid, seed=seed)
    return SimulationResult(capture, intensity, dm, depth, dm.valid, d_range)
