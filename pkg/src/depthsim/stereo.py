"""Soft block matching: ZNCC cost volume, softargmax reduction, sub-pixel interlacing.

The capture is compared against reference rasters of the pattern on a
fronto-parallel plane; a camera pixel ``x`` matching reference column
``x - k`` has disparity ``base + k`` relative to the reference.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import SensorConfig
from .exceptions import ConfigurationError, ContractError, InputError
from .render import ReferencePatterns

__all__ = ["CostVolume", "DepthMap", "to_mono", "zncc_volume", "cost_volume", "soft_disparity",
           "block_match", "strip_split_match", "match_images", "save_cost_volume", "ZNCC_EPS"]

ZNCC_EPS = 1e-6


def to_mono(image):
    """Sum the channels of an HxWxC capture (a monochrome sensor integrating its band)."""
    v = ad.value(image)
    if v.ndim == 2:
        return image
    if v.ndim != 3:
        raise InputError(f"expected HxW or HxWxC image, got shape {v.shape}")
    return ad.sum(image, axis=2) if v.shape[2] > 1 else ad.reshape(image, v.shape[:2])


def zncc_volume(left, right, shifts, radius: int, eps: float = ZNCC_EPS):
    """ZNCC of ``left`` blocks against ``right`` blocks shifted by each entry of ``shifts``.

    Returns an (H - 2r, W - 2r, K) volume; entry k compares the block of
    ``left`` at (y, x) with the block of ``right`` at (y, x - shifts[k]).
    Zero-variance blocks score 0.
    """
    n = float((2 * radius + 1) ** 2)
    moved = ad.shift_stack(right, shifts)                       # H, W, K
    mu_l = ad.box_sum(left, radius) / n                          # h, w
    mu_r = ad.box_sum(moved, radius) / n                         # h, w, K
    e_ll = ad.box_sum(left * left, radius) / n
    e_rr = ad.box_sum(moved * moved, radius) / n
    e_lr = ad.box_sum(ad.reshape(left, ad.value(left).shape + (1,)) * moved, radius) / n
    mu_l3 = ad.reshape(mu_l, ad.value(mu_l).shape + (1,))
    cov = e_lr - mu_l3 * mu_r
    var_l = ad.relu(e_ll - mu_l * mu_l)
    var_r = ad.relu(e_rr - mu_r * mu_r)
    var_l3 = ad.reshape(var_l, ad.value(var_l).shape + (1,))
    return cov / ad.sqrt((var_l3 + eps) * (var_r + eps))


@dataclass
class CostVolume:
    """Matching scores on an (H, W, N) grid with disparity labels along the last axis.

    ``scores`` is zero outside ``valid``; axis order is row-major (y, x, label).
    """

    scores: object
    labels: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple:
        return ad.value(self.scores).shape


@dataclass
class DepthMap:
    """Fractional disparity and the corresponding depth ``fb / d``."""

    disparity: object
    depth: object
    valid: np.ndarray
    confidence: np.ndarray
    labels: np.ndarray

    def numpy(self) -> DepthMap:
        return DepthMap(np.asarray(ad.value(self.disparity)), np.asarray(ad.value(self.depth)),
                        self.valid, self.confidence, self.labels)

    def masked_depth(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.valid, ad.value(self.depth), fill)


def _check_range(d_range, width, base=None):
    d_min, d_max = int(d_range[0]), int(d_range[1])
    if d_min > d_max:
        raise ConfigurationError(f"empty disparity range ({d_min}, {d_max})")
    if base is not None and d_min < base:
        raise ConfigurationError(f"disparity range starts at {d_min} below reference base {base}")
    if d_max - (base or 0) >= width or d_min - (base or 0) <= -width:
        raise ConfigurationError(f"disparity range ({d_min}, {d_max}) exceeds image width {width}")
    return d_min, d_max


def _column_valid(w, radius, shifts):
    x = np.arange(w)
    return (x - radius - max(shifts) >= 0) & (x + radius - min(shifts) <= w - 1) \
        & (x >= radius) & (x <= w - 1 - radius)


def _interlaced_inner(capture, references, d_range, radius, base):
    """Interior (H-2r, W-2r, K*n) volume and its labels."""
    d_min, d_max = d_range
    shifts = list(range(d_min - base, d_max - base + 1))
    left = to_mono(capture)
    n = len(references)
    vols = [zncc_volume(left, to_mono(ref), shifts, radius) for ref in references]
    if n == 1:
        vol = vols[0]
    else:
        st = ad.stack(vols, axis=-1)                              # h, w, K, n
        sh = ad.value(st).shape
        vol = ad.reshape(st, sh[:2] + (sh[2] * n,))
    labels = d_min + np.arange(len(shifts) * n) / n
    return vol, labels, shifts


def cost_volume(capture, reference, cfg: SensorConfig, d_range, *, base_disparity: int = 0) -> CostVolume:
    """ZNCC cost volume between a capture and one reference (or a sub-pixel stack of them).

    ``reference`` may be an image or a :class:`ReferencePatterns`; for a
    plain image the labels are plain shifts offset by ``base_disparity``.
    """
    refs, base = (reference.images, reference.base_disparity) if isinstance(reference, ReferencePatterns) \
        else ([reference], int(base_disparity))
    shape_c = ad.value(capture).shape[:2]
    for r in refs:
        if ad.value(r).shape[:2] != shape_c:
            raise InputError(f"capture {shape_c} and reference {ad.value(r).shape[:2]} differ in size")
    h, w = shape_c
    d_range = _check_range(d_range, w, base)
    rad = cfg.radius
    if h < 2 * rad + 1 or w < 2 * rad + 1:
        raise ConfigurationError(f"block size {cfg.block_size} does not fit a {h}x{w} image")
    inner, labels, shifts = _interlaced_inner(capture, refs, d_range, rad, base)
    scores = ad.pad(inner, [(rad, rad), (rad, rad), (0, 0)])
    valid = np.zeros((h, w), dtype=bool)
    valid[rad:h - rad] = _column_valid(w, rad, shifts)
    scores = ad.where(valid[:, :, None], scores, 0.0)
    return CostVolume(scores, labels, valid)


def soft_disparity(scores, labels, beta):
    """Softargmax over the last axis: sum_k labels_k softmax(beta * scores)_k.

    The per-pixel maximum is subtracted as a constant for stability.
    """
    labels = np.asarray(labels, dtype=float)
    if np.any(ad.value(beta) <= 0):
        raise ConfigurationError("softargmax temperature must be > 0")
    m = np.max(ad.value(scores), axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = ad.exp(beta * (scores - m))
    return ad.sum(e * labels, axis=-1) / ad.sum(e, axis=-1)


def block_match(capture, references: ReferencePatterns, cfg: SensorConfig, d_range=None,
                params: dict | None = None) -> DepthMap:
    """Disparity and depth maps of a capture against the sub-pixel reference table."""
    if len(references.images) != cfg.subpixel_levels:
        raise ContractError(f"{len(references.images)} references for subpixel_levels = {cfg.subpixel_levels}")
    base = references.base_disparity
    d_range = (base, cfg.disparity_bounds[1]) if d_range is None else d_range
    h, w = ad.value(capture).shape[:2]
    d_range = _check_range(d_range, w, base)
    rad = cfg.radius
    if h < 2 * rad + 1 or w < 2 * rad + 1:
        raise ConfigurationError(f"block size {cfg.block_size} does not fit a {h}x{w} image")
    for r in references.images:
        if ad.value(r).shape[:2] != (h, w):
            raise InputError("capture and references differ in size")
    beta = params["temperature"] if params is not None and "temperature" in params else cfg.temperature
    inner, labels, shifts = _interlaced_inner(capture, references.images, d_range, rad, base)
    disparity, valid, confidence = _reduce(inner, labels, shifts, (h, w), rad, beta, cfg.confidence_threshold)
    return DepthMap(disparity, cfg.fb / disparity, valid, confidence, labels)


def _reduce(inner, labels, shifts, shape, rad, beta, threshold):
    """Softargmax the interior volume and embed it in the full frame.

    Border pixels get the first label so that depth stays finite there;
    they are flagged invalid together with low-confidence pixels.
    """
    h, w = shape
    d_inner = soft_disparity(inner, labels, beta)
    border = np.full((h, w), labels[0])
    border[rad:h - rad, rad:w - rad] = 0.0
    disparity = ad.pad(d_inner, [(rad, rad), (rad, rad)]) + border
    confidence = np.zeros((h, w))
    confidence[rad:h - rad, rad:w - rad] = np.max(ad.value(inner), axis=-1)
    valid = np.zeros((h, w), dtype=bool)
    valid[rad:h - rad] = _column_valid(w, rad, shifts)
    valid &= confidence >= threshold
    return disparity, valid, confidence


def _strip_bounds(h, m, rad, block):
    if m < 1:
        raise ConfigurationError("strip count must be >= 1")
    edges = np.linspace(0, h, m + 1).round().astype(int)
    if m > 1 and np.min(np.diff(edges)) < 2 * block:
        raise ConfigurationError(f"{m} strips of a {h}-row image are thinner than 2 x block size")
    return [(int(a), int(b), max(0, int(a) - rad), min(h, int(b) + rad)) for a, b in zip(edges[:-1], edges[1:])]


def strip_split_match(capture, references: ReferencePatterns, cfg: SensorConfig, m: int = 1,
                      threads: int = 1, d_range=None, params: dict | None = None) -> DepthMap:
    """Block matching on ``m`` horizontal strips overlapping by the block radius.

    Every output pixel's window lies inside its strip, and the box sums use
    a fixed per-pixel summation order, so the result equals
    :func:`block_match` bit for bit for any ``m`` and thread count.
    """
    h = ad.value(capture).shape[0]
    bounds = _strip_bounds(h, m, cfg.radius, cfg.block_size)
    if m == 1:
        return block_match(capture, references, cfg, d_range, params)

    def run(b):
        a, e, lo, hi = b
        sub = ReferencePatterns([ad.getitem(r, slice(lo, hi)) for r in references.images],
                                references.base_disparity, references.levels)
        dm = block_match(ad.getitem(capture, slice(lo, hi)), sub, cfg, d_range, params)
        cut = slice(a - lo, e - lo)
        return dm, cut

    recording = any(ad.is_var(x) for x in [capture, *references.images]) or (
        params is not None and ad.is_var(params.get("temperature")))
    if threads > 1 and not recording:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        # tape construction stays single-threaded and in strip order
        parts = [run(b) for b in bounds]
    rows = [[getattr(dm, name)[cut] for dm, cut in parts] for name in ("valid", "confidence")]
    disp = ad.concatenate([ad.getitem(dm.disparity, cut) for dm, cut in parts], axis=0)
    valid = np.concatenate(rows[0], axis=0)
    conf = np.concatenate(rows[1], axis=0)
    return DepthMap(disp, cfg.fb / disp, valid, conf, parts[0][0].labels)


def save_cost_volume(path, volume: CostVolume) -> None:
    """Raw dump: ``.npz`` with float64 ``scores`` (H, W, N), ``labels`` and ``valid``."""
    np.savez(path, scores=np.asarray(ad.value(volume.scores)), labels=volume.labels, valid=volume.valid)


def match_images(left, right, d_range, block_size: int = 9, temperature: float = 15.0,
                 confidence_threshold: float = 0.25) -> DepthMap:
    """Soft block matching of a generic rectified pair (no sub-pixel references).

    ``left[y, x]`` is compared with ``right[y, x - d]``; ``depth`` is None.
    """
    lv, rv = ad.value(left), ad.value(right)
    if lv.shape != rv.shape:
        raise InputError(f"pair differs in shape: {lv.shape} vs {rv.shape}")
    if block_size < 3 or block_size % 2 == 0:
        raise ConfigurationError(f"block size must be odd and >= 3, got {block_size}")
    h, w = lv.shape[:2]
    rad = block_size // 2
    if h < block_size or w < block_size:
        raise ConfigurationError(f"block size {block_size} does not fit a {h}x{w} image")
    d_range = _check_range(d_range, w)
    inner, labels, shifts = _interlaced_inner(left, [right], d_range, rad, 0)
    disparity, valid, confidence = _reduce(inner, labels, shifts, (h, w), rad, temperature, confidence_threshold)
    return DepthMap(disparity, None, valid, confidence, labels)
