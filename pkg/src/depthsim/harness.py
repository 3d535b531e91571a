"""Experiment drivers: flat-plane noise study, generic pair matching, gradient checks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import ParameterSet, PatternImage, Scene, SensorConfig, preset
from .exceptions import ConfigurationError, InputError, NumericalError
from .io import write_csv
from .noise import ConvPostProcessor
from .optim import LossSpec, loss
from .pipeline import simulate
from .render import render_reference_patterns
from .stereo import DepthMap, match_images, to_mono

__all__ = ["NoiseStudyGrid", "NoiseStudyResult", "noise_study", "radial_bins", "match_pair",
           "gradcheck_config", "GradcheckReport", "run_gradcheck", "NOISE_STUDY_HEADER",
           "nguyen_axial_std", "write_reference_curves"]

NOISE_STUDY_HEADER = ["z_mm", "alpha_deg", "r_bin_px", "std_err_mm", "n_pixels"]


@dataclass(frozen=True)
class NoiseStudyGrid:
    distances: tuple
    tilts: tuple = (0.0,)
    samples: int = 1

    def __post_init__(self):
        if not self.distances or not self.tilts:
            raise ConfigurationError("noise-study grid needs at least one distance and one tilt")
        if self.samples < 1:
            raise ConfigurationError("samples per cell must be >= 1")
        if any(abs(a) >= 90 for a in self.tilts):
            raise ConfigurationError("tilts must satisfy |alpha| < 90 degrees")

    def validate(self, cfg: SensorConfig) -> None:
        bad = [z for z in self.distances if not cfg.z_min <= z <= cfg.z_max]
        if bad:
            raise ConfigurationError(f"distances {bad} outside sensor range [{cfg.z_min}, {cfg.z_max}]")


def radial_bins(cfg: SensorConfig, n_bins: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel bin index and bin centres for equal-width radial bins out to the half-diagonal."""
    cx, cy = cfg.principal_point
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width]
    r = np.hypot(xs - cx, ys - cy)
    r_max = math.hypot(cfg.width / 2.0, cfg.height / 2.0)
    edges = np.linspace(0.0, r_max, n_bins + 1)
    idx = np.clip(np.digitize(r, edges) - 1, 0, n_bins - 1)
    return idx, 0.5 * (edges[:-1] + edges[1:])


@dataclass
class NoiseStudyResult:
    rows: list = field(default_factory=list)       # (z, alpha, r_centre, std, n) per radial bin
    cells: dict = field(default_factory=dict)      # (z, alpha) -> (std, n) over all valid pixels

    def profile(self, z: float, alpha: float) -> np.ndarray:
        return np.array([r[3] for r in self.rows if r[0] == z and r[1] == alpha])

    def to_csv(self, path) -> None:
        write_csv(path, NOISE_STUDY_HEADER,
                  [[float(z), float(a), float(rc), float(s), int(n)] for z, a, rc, s, n in self.rows])


def noise_study(cfg: SensorConfig, grid: NoiseStudyGrid, pattern: PatternImage | None = None, *,
                seed: int = 0, n_bins: int = 16, threads: int = 1, strips: int = 1) -> NoiseStudyResult:
    """Standard depth error of a simulated flat plane over distance, tilt and radius.

    Each cell renders the plane, block-matches over the full sensor range
    and compares with the analytic z-buffer.  The error statistic is the
    standard deviation of (measured - true) depth over valid pixels;
    samples of one cell use consecutive noise seeds and are pooled.
    Cells or bins without valid pixels are reported with NaN and n = 0.
    """
    grid.validate(cfg)
    pattern = pattern if pattern is not None else PatternImage.for_sensor(cfg, seed=seed)
    refs = render_reference_patterns(cfg, pattern)
    bin_idx, centres = radial_bins(cfg, n_bins)
    out = NoiseStudyResult()
    for z in grid.distances:
        for alpha in grid.tilts:
            errs, bins = [], []
            for s in range(grid.samples):
                scene = Scene.plane_scene(float(z), float(alpha))
                r = simulate(scene, cfg, pattern, seed=seed + s, references=refs,
                             d_range=cfg.disparity_bounds, threads=threads, strips=strips)
                ok = r.valid & r.capture.hit_mask
                errs.append((np.asarray(r.depth) - np.asarray(r.capture.gt_depth))[ok])
                bins.append(bin_idx[ok])
            e = np.concatenate(errs)
            b = np.concatenate(bins)
            out.cells[(float(z), float(alpha))] = (float(np.std(e)) if e.size else float("nan"), int(e.size))
            for k in range(n_bins):
                ek = e[b == k]
                out.rows.append((float(z), float(alpha), float(centres[k]),
                                 float(np.std(ek)) if ek.size else float("nan"), int(ek.size)))
    return out


def nguyen_axial_std(z_mm, alpha_deg=0.0):
    """Axial depth noise (mm) of the Kinect v1 model of Nguyen et al. (2012).

    sigma = 1.2 + 1.9 (z - 0.4)^2 mm with z in metres, plus the tilt term
    0.1 / sqrt(z) * a^2 / (pi/2 - a)^2 mm.  Published for 10-60 degrees;
    provided as a plotting reference only.
    """
    z = np.asarray(z_mm, dtype=float) / 1000.0
    a = np.radians(np.asarray(alpha_deg, dtype=float))
    return 1.2 + 1.9 * (z - 0.4) ** 2 + 0.1 / np.sqrt(z) * a ** 2 / (np.pi / 2 - a) ** 2


def write_reference_curves(path, distances, tilts) -> None:
    """CSV (model, z_mm, alpha_deg, std_mm) of published noise models on the study grid."""
    rows = [["nguyen2012", float(z), float(a), float(nguyen_axial_std(z, a))] for z in distances for a in tilts]
    write_csv(path, ["model", "z_mm", "alpha_deg", "std_mm"], rows)


def match_pair(left, right, *, max_disparity: int | None = None, min_disparity: int = 0,
               block_size: int = 9, temperature: float = 15.0, confidence_threshold: float = 0.25) -> DepthMap:
    """Disparity of a generic rectified pair: ``left[y, x]`` matches ``right[y, x - d]``."""
    lv = np.asarray(to_mono(np.asarray(left, dtype=float)))
    rv = np.asarray(to_mono(np.asarray(right, dtype=float)))
    if lv.shape != rv.shape:
        raise InputError(f"pair differs in shape: {lv.shape} vs {rv.shape}")
    if max_disparity is None:
        max_disparity = max(min_disparity, lv.shape[1] // 4)
    return match_images(lv, rv, (min_disparity, max_disparity), block_size, temperature, confidence_threshold)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

SCALAR_PARAMETERS = ("shadow_bias", "noise_mean", "noise_std", "temperature", "emitter_intensity",
                     "shadow_steepness", "plane_z", "plane_tilt")
CONV_PARAMETERS = ("conv_w1", "conv_b1", "conv_w2", "conv_b2")
# central-difference steps relative to max(1, |p|)
_STEPS = {"plane_tilt": 1e-7, "noise_std": 1e-6, "noise_mean": 1e-5}


def gradcheck_config(base: SensorConfig, size: int) -> SensorConfig:
    """A size x size sensor keeping the device's focal length, baseline and sub-pixel levels.

    The depth range is moved out so that disparities sit near size / 4,
    the block shrinks to fit, and the emitter intensity is rescaled to
    keep the capture brightness of the full device at 1 m.
    """
    if size < 8:
        raise ConfigurationError("gradient-check scenes need at least 8x8 pixels")
    d_c = max(2.0, size / 4.0)
    z_min, z_max = base.fb / (d_c + 1.4), base.fb / (d_c - 1.4)
    block = min(base.block_size, max(3, (size // 4) | 1))
    z_c = base.fb / d_c
    return base.replace(width=size, height=size, z_min=z_min, z_max=z_max, block_size=block,
                        emitter_intensity=base.emitter_intensity * (z_c / 1000.0) ** 2,
                        noise_std=0.02, noise_mean=0.01, supersampling=2,
                        name=f"{base.name}_gradcheck{size}")


@dataclass
class GradcheckReport:
    errors: dict            # name -> max relative error over checked entries
    checked: dict           # name -> number of entries checked
    seconds: float

    def passed(self, tol: float = 1e-4) -> bool:
        return all(e < tol for e in self.errors.values())


def run_gradcheck(base: SensorConfig | str = "kinect_v1", size: int = 8, *, tilt_deg: float | None = None,
                  seed: int = 0, n_samples: int = 32) -> GradcheckReport:
    """Compare tape gradients of a Huber + Sobel depth loss with central differences.

    Covers every scalar sensor/scene parameter, ``n_samples`` pattern pixels
    drawn from the lit footprint, and ``n_samples`` entries of each
    convolution array of the residual post-processor.
    """
    t0 = time.perf_counter()
    base = preset(base) if isinstance(base, str) else base
    cfg = gradcheck_config(base, size)
    if tilt_deg is None:
        tilt_deg = 0.0 if size <= 16 else 10.0
    rng = np.random.default_rng(seed)
    pattern = PatternImage.for_sensor(cfg, seed=seed)
    # non-integer disparity so the soft reduction is not at a symmetric point
    scene = Scene.plane_scene(cfg.fb / (cfg.fb / cfg.z_max + 1.37), tilt_deg)
    proc = ConvPostProcessor.random(seed=seed + 1, scale=0.02)
    ps = ParameterSet.from_components(cfg, scene, pattern, proc)
    spec = LossSpec()

    def objective(bound):
        r = simulate(scene, cfg, pattern, bound, seed=seed, postprocess="conv2", processor=proc)
        return loss(r.depth, r.capture.gt_depth, spec, r.valid, r.capture.hit_mask)

    names = list(SCALAR_PARAMETERS) + ["pattern"] + list(CONV_PARAMETERS)
    for n in names:
        ps.flag(n)
    tape = ad.Tape()
    total = objective(ps.bind(tape))
    grads = ad.backward(tape, total)

    def fd(name, index, h):
        def at(delta):
            q = ps.copy()
            v = q[name].copy()
            if index is None:
                v = v + delta
            else:
                v[index] += delta
            q.set(name, v)
            val = float(ad.value(objective(q.bind())))
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss while perturbing {name}")
            return val
        return (at(h) - at(-h)) / (2 * h)

    errors, checked = {}, {}
    for name in SCALAR_PARAMETERS:
        v = float(ps[name])
        h = _STEPS.get(name, 1e-6) * max(1.0, abs(v))
        g_fd = fd(name, None, h)
        errors[name] = abs(float(grads[name]) - g_fd) / max(1.0, abs(g_fd))
        checked[name] = 1
    lit = np.argwhere(grads["pattern"] != 0)
    pick = lit[rng.choice(len(lit), size=min(n_samples, len(lit)), replace=False)] if len(lit) else []
    errs = []
    for idx in pick:
        idx = tuple(int(i) for i in idx)
        g_fd = fd("pattern", idx, 1e-6)
        errs.append(abs(grads["pattern"][idx] - g_fd) / max(1.0, abs(g_fd)))
    errors["pattern"] = max(errs) if errs else 0.0
    checked["pattern"] = len(errs)
    for name in CONV_PARAMETERS:
        flat = np.arange(ps[name].size)
        sel = rng.choice(flat, size=min(n_samples, flat.size), replace=False)
        errs = []
        for f in sel:
            idx = np.unravel_index(int(f), ps[name].shape)
            g_fd = fd(name, idx, 1e-6)
            errs.append(abs(grads[name][idx] - g_fd) / max(1.0, abs(g_fd)))
        errors[name] = max(errs)
        checked[name] = len(errs)
    return GradcheckReport(errors, checked, time.perf_counter() - t0)
