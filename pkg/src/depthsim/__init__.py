"""Differentiable structured-light depth sensor simulator."""
from .core import (PARAMETER_NAMES, PRESETS, ParameterSet, PatternImage, Plane, Pose, Scene, SensorConfig,
                   box_triangles, disparity_range, preset)
from .estimators import ConvDepthRefiner, DepthSensorSimulator, SoftBlockMatcher
from .exceptions import ConfigurationError, ContractError, DepthSimError, InputError, NumericalError
from .harness import NoiseStudyGrid, match_pair, noise_study, run_gradcheck
from .noise import ConvPostProcessor, apply_capture_noise, postprocess_depth
from .optim import LossSpec, ReferenceScan, calibrate, loss, optimize_pattern, optimize_scene_pose
from .pipeline import SimulationResult, simulate
from .render import ReferencePatterns, render_capture, render_reference_patterns
from .stereo import block_match, cost_volume, soft_disparity, strip_split_match

__version__ = "0.1.0"

__all__ = [
    "PARAMETER_NAMES", "PRESETS", "ParameterSet", "PatternImage", "Plane", "Pose", "Scene", "SensorConfig",
    "box_triangles", "disparity_range", "preset",
    "ConvDepthRefiner", "DepthSensorSimulator", "SoftBlockMatcher",
    "ConfigurationError", "ContractError", "DepthSimError", "InputError", "NumericalError",
    "NoiseStudyGrid", "match_pair", "noise_study", "run_gradcheck",
    "ConvPostProcessor", "apply_capture_noise", "postprocess_depth",
    "LossSpec", "ReferenceScan", "calibrate", "loss", "optimize_pattern", "optimize_scene_pose",
    "SimulationResult", "simulate",
    "ReferencePatterns", "render_capture", "render_reference_patterns",
    "block_match", "cost_volume", "soft_disparity", "strip_split_match",
]
