"""Depth losses, Adam, and the calibration and toy optimization workflows."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import ParameterSet, PatternImage, Scene, SensorConfig
from .exceptions import ConfigurationError, ContractError, InputError, NumericalError
from .io import write_csv
from .noise import ConvPostProcessor
from .pipeline import REFERENCE_PARAMETERS, simulate
from .render import render_reference_patterns

__all__ = ["LossSpec", "huber", "sobel", "loss", "AdamState", "adam_step", "Trace", "calibrate",
           "optimize_scene_pose", "optimize_pattern", "ReferenceScan", "channel_energy"]

LOSS_KINDS = ("l1", "huber", "sobel_gradient")


@dataclass(frozen=True)
class LossSpec:
    """Weighted sum of depth loss terms (``l1``, ``huber``, ``sobel_gradient``)."""

    weights: dict = field(default_factory=lambda: {"huber": 1.0, "sobel_gradient": 1.0})
    huber_threshold: float = 10.0

    def __post_init__(self):
        unknown = set(self.weights) - set(LOSS_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
        w = np.array(list(self.weights.values()), dtype=float)
        if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
            raise ConfigurationError("loss weights must be >= 0 with at least one positive")
        if self.huber_threshold <= 0:
            raise ConfigurationError("huber threshold must be > 0")

    @classmethod
    def l1(cls) -> LossSpec:
        return cls({"l1": 1.0})


def huber(e, threshold: float):
    """0.5 e^2 inside the threshold, threshold * (|e| - threshold / 2) outside."""
    a = ad.absolute(e)
    inside = np.abs(ad.value(e)) <= threshold
    return ad.where(inside, 0.5 * e * e, threshold * (a - 0.5 * threshold))


def sobel(z):
    """Sobel x and y responses on the (H-2, W-2) interior."""
    def s(dy, dx):
        h, w = ad.value(z).shape
        return ad.getitem(z, (slice(1 + dy, h - 1 + dy), slice(1 + dx, w - 1 + dx)))
    gx = (s(-1, 1) + 2.0 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2.0 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1))
    return gx, gy


def _eroded(mask):
    m = np.asarray(mask, bool)
    out = np.ones((m.shape[0] - 2, m.shape[1] - 2), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            out &= m[dy:dy + m.shape[0] - 2, dx:dx + m.shape[1] - 2]
    return out


def _masked_mean(x, mask):
    idx = np.flatnonzero(mask)
    return ad.mean(ad.getitem(ad.reshape(x, (-1,)), idx))


def loss(z_sim, z_ref, spec: LossSpec | None = None, valid_sim=None, valid_ref=None):
    """Weighted depth loss averaged over jointly valid pixels."""
    spec = spec or LossSpec()
    shape = ad.value(z_sim).shape
    if ad.value(z_ref).shape != shape:
        raise InputError(f"depth maps differ in shape: {shape} vs {ad.value(z_ref).shape}")
    mask = np.ones(shape, dtype=bool)
    for v in (valid_sim, valid_ref):
        if v is not None:
            mask &= np.asarray(v, bool)
    mask &= np.isfinite(ad.value(z_sim)) & np.isfinite(ad.value(z_ref))
    if not mask.any():
        raise ContractError("no jointly valid pixels")
    total = 0.0
    e = z_sim - z_ref
    for kind, w in spec.weights.items():
        if w == 0:
            continue
        if kind == "l1":
            term = _masked_mean(ad.absolute(e), mask)
        elif kind == "huber":
            term = _masked_mean(huber(e, spec.huber_threshold), mask)
        else:
            inner = _eroded(mask)
            if not inner.any():
                raise ContractError("no jointly valid 3x3 neighbourhoods for the gradient loss")
            sx, sy = sobel(z_sim)
            rx, ry = sobel(z_ref)
            term = _masked_mean(ad.absolute(sx - rx) + ad.absolute(sy - ry), inner)
        total = total + w * term
    return total


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment estimates for bias-corrected Adam.

    ``lr`` is a float or a per-parameter mapping (missing names use
    ``default_lr``); step t uses ``lr * lr_decay ** (t - 1)``.
    """

    lr: float | dict = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    default_lr: float = 1e-3
    lr_decay: float = 1.0

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must lie in (0, 1]")

    def rate(self, name: str) -> float:
        base = self.lr.get(name, self.default_lr) if isinstance(self.lr, dict) else self.lr
        return float(base) * self.lr_decay ** max(self.step - 1, 0)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update of ``params`` (mutated in place and returned)."""
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != np.shape(params[name]):
            raise ContractError(f"gradient shape {g.shape} != parameter shape {np.shape(params[name])} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        p = np.asarray(params[name], dtype=float)
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        params[name] = p - state.rate(name) * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# workflows
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    """Per-iteration loss and parameter values (iteration 0 is the initial state)."""

    names: list
    rows: list = field(default_factory=list)

    def add(self, it: int, loss_value: float, values: dict) -> None:
        self.rows.append((it, float(loss_value), {k: np.array(values[k], dtype=float) for k in self.names}))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def values(self, name: str) -> np.ndarray:
        return np.array([r[2][name] for r in self.rows])

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.losses)

    def to_csv(self, path) -> None:
        """Columns: iteration, loss, then one column per scalar entry (``name[i]`` for arrays)."""
        cols, keys = [], []
        for n in self.names:
            v = self.rows[0][2][n] if self.rows else np.zeros(())
            if v.size == 1:
                cols.append(n)
                keys.append((n, None))
            elif v.size <= 16:
                for i in range(v.size):
                    cols.append(f"{n}[{i}]")
                    keys.append((n, i))
        rows = [[it, lv] + [float(vals[n]) if i is None else float(vals[n].reshape(-1)[i]) for n, i in keys]
                for it, lv, vals in self.rows]
        write_csv(path, ["iteration", "loss"] + cols, rows)


@dataclass
class ReferenceScan:
    """A measured (or simulated) depth map of a known scene."""

    scene: Scene
    depth: np.ndarray
    valid: np.ndarray


@dataclass
class CalibrationResult:
    params: ParameterSet
    trace: Trace
    best_iteration: int


def _check_names(ps: ParameterSet, names):
    for n in names:
        if n not in ps:
            raise ConfigurationError(f"parameter {n!r} is not part of the parameter set")


def calibrate(cfg: SensorConfig, pattern: PatternImage, scans: Sequence[ReferenceScan], params: ParameterSet,
              fit: Sequence[str], *, spec: LossSpec | None = None, iterations: int = 100,
              lr: float | dict = 1e-3, seed: int = 0, postprocess: str = "none",
              processor: ConvPostProcessor | None = None, strips: int = 1, threads: int = 1,
              bounds: dict | None = None, lr_decay: float = 1.0) -> CalibrationResult:
    """Fit the ``fit`` subset of ``params`` to reference depth scans by Adam.

    The returned parameters are those with the lowest loss seen (the
    trace's best-so-far minimum).  ``bounds`` maps names to (lo, hi)
    clamps applied after each step; ``lr_decay`` shrinks the step size
    geometrically so the iterate settles in kinked minima.
    """
    spec = spec or LossSpec()
    if not scans:
        raise InputError("calibration needs at least one reference scan")
    if iterations < 0:
        raise ConfigurationError("iterations must be >= 0")
    ps = params.copy()
    _check_names(ps, fit)
    for n in ps.flagged:
        ps.flag(n, False)
    for n in fit:
        ps.flag(n)
    bounds = dict(bounds or {})
    bounds.setdefault("noise_std", (0.0, np.inf))
    for n in ("shadow_steepness", "temperature", "emitter_intensity"):
        bounds.setdefault(n, (1e-9, np.inf))
    # references only stay valid while none of their inputs is being fitted
    refs_cache = (None if set(fit) & set(REFERENCE_PARAMETERS)
                  else render_reference_patterns(cfg, pattern, ps.bind()))
    state = AdamState(lr=lr, default_lr=lr if not isinstance(lr, dict) else 1e-3, lr_decay=lr_decay)
    trace = Trace(list(fit))
    best = (np.inf, ps.copy(), 0)

    def evaluate(record: bool):
        tape = ad.Tape() if record else None
        bound = ps.bind(tape)
        total = 0.0
        for scan in scans:
            r = simulate(scan.scene, cfg, pattern, bound, seed=seed, postprocess=postprocess,
                         processor=processor, strips=strips, threads=threads, references=refs_cache)
            total = total + loss(r.depth, scan.depth, spec, r.valid, scan.valid)
        total = total / len(scans)
        return tape, total

    for it in range(iterations + 1):
        tape, total = evaluate(record=it < iterations)
        lv = float(np.asarray(ad.value(total)).reshape(()))
        values = {n: ps[n] for n in fit}
        trace.add(it, lv, values)
        if not np.isfinite(lv):
            err = NumericalError(f"loss diverged at iteration {it}")
            err.trace = trace
            raise err
        if lv < best[0]:
            best = (lv, ps.copy(), it)
        if it == iterations:
            break
        grads = ad.backward(tape, total, list(fit)) if ad.is_var(total) else {n: np.zeros_like(ps[n]) for n in fit}
        current = {n: ps[n] for n in fit}
        adam_step(current, grads, state)
        for n in fit:
            v = current[n]
            if n in bounds:
                v = np.clip(v, *bounds[n])
            ps.set(n, v)
    out = best[1]
    for n in out.flagged:
        out.flag(n, False)
    return CalibrationResult(out, trace, best[2])


def _l1_to_truth(r):
    """L1 between simulated depth and the scene's noise-free z-buffer over valid pixels."""
    return loss(r.depth, r.capture.gt_depth, LossSpec.l1(), r.valid, r.capture.hit_mask)


@dataclass
class PoseResult:
    tilt_deg: np.ndarray       # per iteration, including the initial value
    losses: np.ndarray
    trace: Trace


def optimize_scene_pose(scene: Scene, cfg: SensorConfig, pattern: PatternImage, *, iterations: int = 500,
                        lr: float = 0.01, seed: int = 0, tol_deg: float | None = None) -> PoseResult:
    """Rotate a tilted plane to minimise the sensor's depth error (L1 to ground truth).

    The tilt is optimized in radians.  The plane must cover the frame at
    every visited angle; otherwise gradients through the silhouette would
    be missing and the run aborts.
    """
    if scene.plane is None:
        raise InputError("pose optimization needs a scene with a plane")
    ps = ParameterSet.from_components(cfg, scene, pattern, flags=("plane_tilt",))
    refs = render_reference_patterns(cfg, pattern)
    state = AdamState(lr=lr)
    trace = Trace(["plane_tilt"])
    for it in range(iterations + 1):
        alpha = float(ps["plane_tilt"])
        if not abs(alpha) < math.pi / 2:
            raise ContractError(f"tilt left (-90, 90) degrees at iteration {it}")
        tape = ad.Tape()
        bound = ps.bind(tape)
        sc = scene.with_plane(alpha_deg=math.degrees(alpha))
        r = simulate(sc, cfg, pattern, bound, seed=seed, references=refs)
        if not r.capture.hit_mask.all():
            raise ContractError(f"plane no longer covers the frame at iteration {it}")
        total = _l1_to_truth(r)
        trace.add(it, float(ad.value(total)), {"plane_tilt": alpha})
        if it == iterations or (tol_deg is not None and abs(math.degrees(alpha)) < tol_deg):
            break
        grads = ad.backward(tape, total, ["plane_tilt"])
        cur = {"plane_tilt": ps["plane_tilt"]}
        adam_step(cur, grads, state)
        ps.set("plane_tilt", cur["plane_tilt"])
    return PoseResult(np.degrees(trace.values("plane_tilt")), trace.losses, trace)


def channel_energy(values: np.ndarray) -> np.ndarray:
    """Per-channel sum of pattern values."""
    return np.asarray(values, dtype=float).reshape(-1, np.shape(values)[-1]).sum(axis=0)


def _shares(energy: np.ndarray) -> np.ndarray:
    tot = energy.sum(axis=-1, keepdims=True)
    return energy / np.where(tot > 0, tot, 1.0)


@dataclass
class PatternResult:
    pattern: PatternImage
    energy: np.ndarray         # (iterations + 1, C) per-channel energy
    losses: np.ndarray
    initial: PatternImage | None = None

    @property
    def fractions(self) -> np.ndarray:
        """Per-channel shares of the whole pattern's energy, per iteration."""
        return _shares(self.energy)

    @property
    def footprint(self) -> np.ndarray:
        """Pattern pixels the optimization changed in any channel (the lit footprint)."""
        if self.initial is None:
            raise ContractError("initial pattern not recorded")
        return np.any(self.pattern.values != self.initial.values, axis=2)

    def footprint_fractions(self) -> tuple[np.ndarray, np.ndarray]:
        """Initial and final channel shares over the lit footprint.

        Margin pixels never reach the camera and keep their initial values,
        so whole-pattern shares are diluted by the pattern's size.
        """
        fp = self.footprint
        return _shares(self.initial.values[fp].sum(axis=0)), _shares(self.pattern.values[fp].sum(axis=0))


def optimize_pattern(scene: Scene, cfg: SensorConfig, pattern: PatternImage, *, iterations: int = 500,
                     lr: float = 0.01, v_max: float = 1.0, seed: int = 0,
                     resample_noise: bool = True, noise_samples: int = 1) -> PatternResult:
    """Optimize the emitted pattern for depth accuracy (L1 to ground truth).

    Values are clamped to [0, v_max] after every step (projected Adam).
    With ``resample_noise`` every iteration draws fresh capture noise, so
    the pattern cannot overfit a single noise field; the loss is averaged
    over ``noise_samples`` draws per iteration.
    """
    if v_max <= 0:
        raise ConfigurationError("v_max must be > 0")
    if noise_samples < 1:
        raise ConfigurationError("noise_samples must be >= 1")
    ps = ParameterSet.from_components(cfg, scene, pattern, flags=("pattern",))
    state = AdamState(lr=lr)
    energy, losses = [], []
    for it in range(iterations + 1):
        tape = ad.Tape()
        bound = ps.bind(tape)
        total = 0.0
        for k in range(noise_samples):
            s = seed + it * noise_samples + k if resample_noise else seed + k
            total = total + _l1_to_truth(simulate(scene, cfg, pattern, bound, seed=s))
        total = total / noise_samples
        energy.append(channel_energy(ps["pattern"]))
        losses.append(float(ad.value(total)))
        if it == iterations:
            break
        grads = ad.backward(tape, total, ["pattern"])
        cur = {"pattern": ps["pattern"]}
        adam_step(cur, grads, state)
        ps.set("pattern", np.clip(cur["pattern"], 0.0, v_max))
    return PatternResult(PatternImage(ps["pattern"]), np.array(energy), np.array(losses), pattern)
