"""Sensor description, presets, scenes, patterns and the optimizable parameter set.

Units are millimetres for lengths and pixels for image quantities.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, InputError

__all__ = [
    "SensorConfig", "PRESETS", "preset", "disparity_range", "PatternImage",
    "Plane", "Pose", "Scene", "box_triangles", "Parameter", "ParameterSet", "PARAMETER_NAMES",
]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SensorConfig:
    """Structured-light device description.

    Camera and emitter share the focal length and principal point; the
    emitter centre sits at ``(baseline, 0, 0)`` in camera coordinates.
    """

    width: int = 640
    height: int = 480
    focal_length: float = 572.41
    baseline: float = 75.0
    z_min: float = 400.0
    z_max: float = 4000.0
    block_size: int = 9
    emitter_intensity: float = 1.5e6
    shadow_bias: float = 5.0
    temperature: float = 15.0
    subpixel_levels: int = 2
    noise_mean: float = 0.0
    noise_std: float = 0.0
    shadow_steepness: float = 1.0
    supersampling: int = 2
    ambient: float = 0.0
    confidence_threshold: float = 0.25
    name: str = "custom"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image dimensions must be positive")
        if self.focal_length <= 0 or self.baseline < 0:
            raise ConfigurationError("focal length must be > 0 and baseline >= 0")
        if not (self.z_min > 0 and self.z_max > self.z_min):
            raise ConfigurationError(f"invalid range [{self.z_min}, {self.z_max}]")
        if self.block_size < 3 or self.block_size % 2 == 0:
            raise ConfigurationError(f"block size must be odd and >= 3, got {self.block_size}")
        if self.temperature <= 0:
            raise ConfigurationError("softargmax temperature must be > 0")
        if self.subpixel_levels < 1:
            raise ConfigurationError("subpixel_levels must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.shadow_steepness <= 0:
            raise ConfigurationError("shadow_steepness must be > 0")
        if self.supersampling < 1:
            raise ConfigurationError("supersampling must be >= 1")
        d_min, d_max = self.disparity_bounds
        if d_min < 1:
            raise ConfigurationError(f"d_min = {d_min} < 1; lower z_max")
        if d_max >= self.width:
            raise ConfigurationError(f"d_max = {d_max} >= width {self.width}; raise z_min")

    @property
    def fb(self) -> float:
        """Focal length times baseline (px * mm): depth = fb / disparity."""
        return self.focal_length * self.baseline

    @property
    def disparity_bounds(self) -> tuple[int, int]:
        return (_round_half_up(self.fb / self.z_max), _round_half_up(self.fb / self.z_min))

    @property
    def principal_point(self) -> tuple[float, float]:
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def radius(self) -> int:
        return self.block_size // 2

    def replace(self, **changes) -> SensorConfig:
        return dataclasses.replace(self, **changes)

    # serialization ---------------------------------------------------------
    def to_text(self) -> str:
        lines = ["[sensor]"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if not isinstance(v, str) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: SensorConfig | None = None) -> SensorConfig:
        """Parse ``key = value`` lines; a leading ``[sensor]`` header is optional.

        A ``preset = <name>`` key starts from that preset.
        """
        if not text.lstrip().startswith("["):
            text = "[sensor]\n" + text
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed configuration: {exc}") from exc
        if not parser.has_section("sensor"):
            raise ConfigurationError("configuration needs a [sensor] section")
        items = dict(parser.items("sensor"))
        if "preset" in items:
            base = preset(items.pop("preset"))
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in items.items():
            if key not in types:
                raise ConfigurationError(f"unknown configuration key {key!r}")
            current = getattr(base, key)
            try:
                if isinstance(current, str):
                    changes[key] = raw
                elif isinstance(current, int):
                    changes[key] = int(raw)
                else:
                    changes[key] = float(raw)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
        return base.replace(**changes)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> SensorConfig:
        return cls.from_text(Path(path).read_text())


PRESETS = {
    "kinect_v1": SensorConfig(
        width=640, height=480, focal_length=572.41, baseline=75.0,
        z_min=400.0, z_max=4000.0, block_size=9, emitter_intensity=1.5e6,
        shadow_bias=5.0, temperature=15.0, subpixel_levels=2, name="kinect_v1",
    ),
    "matterport_pro2": SensorConfig(
        width=1280, height=1024, focal_length=1075.43, baseline=75.0,
        z_min=400.0, z_max=8000.0, block_size=11, emitter_intensity=1.5e12,
        shadow_bias=1.0, temperature=25.0, subpixel_levels=4, name="matterport_pro2",
    ),
}


def preset(name: str) -> SensorConfig:
    """Return the parameter table of a known device."""
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def disparity_range(cfg: SensorConfig, z_bounds: tuple[float, float] | None = None) -> tuple[int, int]:
    """Integer disparity search range for the sensor, optionally narrowed by scene depth.

    ``z_bounds`` = (z_lower, z_upper) is clipped to the sensor range.
    """
    z_lower, z_upper = cfg.z_min, cfg.z_max
    if z_bounds is not None:
        lo, hi = float(z_bounds[0]), float(z_bounds[1])
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise ConfigurationError(f"invalid depth bounds {z_bounds}")
        z_lower = min(max(lo, cfg.z_min), cfg.z_max)
        z_upper = min(max(hi, cfg.z_min), cfg.z_max)
    d_min = _round_half_up(cfg.fb / z_upper)
    d_max = _round_half_up(cfg.fb / z_lower)
    if d_min > d_max or d_min < 0:
        raise ConfigurationError(f"empty disparity range ({d_min}, {d_max})")
    return d_min, d_max


# ---------------------------------------------------------------------------
# pattern
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatternImage:
    """Emitted light pattern, sampled bilinearly and zero outside its extent.

    The pattern is centred on the emitter principal point and may be larger
    than the camera frame (a wider emitter field of view).
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise InputError(f"pattern must be HxW, HxWx1 or HxWx3, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InputError("pattern values must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def random_dots(cls, width: int, height: int, *, channels: int = 1, density: float = 0.15,
                    level: float = 1.0, seed: int = 0, shared: bool = False) -> PatternImage:
        """Pseudo-random dot pattern (stand-in for a device's proprietary pattern).

        With ``shared`` every channel carries the same dots (white light);
        otherwise each channel gets an independent layout.
        """
        rng = np.random.default_rng(seed)
        n = 1 if shared else channels
        dots = (rng.random((height, width, n)) < density).astype(float) * level
        if shared:
            dots = np.repeat(dots, channels, axis=2)
        return cls(dots)

    @classmethod
    def for_sensor(cls, cfg: SensorConfig, *, channels: int = 1, density: float = 0.15,
                   level: float = 1.0, seed: int = 0, shared: bool = False,
                   margin: int | None = None) -> PatternImage:
        """Random dot pattern wide enough to light the whole frame over the sensor range."""
        margin = cfg.disparity_bounds[1] + 2 if margin is None else margin
        return cls.random_dots(cfg.width + 2 * margin, cfg.height + 2, channels=channels,
                               density=density, level=level, seed=seed, shared=shared)

    @classmethod
    def load(cls, path) -> PatternImage:
        from .io import read_image
        return cls(read_image(path))

    def offset(self, cfg: SensorConfig) -> tuple[float, float]:
        """Pattern pixel offset of the emitter's frame origin."""
        return ((self.width - cfg.width) / 2.0, (self.height - cfg.height) / 2.0)


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plane:
    """Plane through (0, 0, z) spanned by (1, 0, 0) and (0, cos a, sin a)."""

    z: float
    alpha_deg: float = 0.0
    albedo: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (np.isfinite(self.z) and self.z > 0):
            raise InputError("plane distance must be positive")
        if abs(self.alpha_deg) >= 90:
            raise InputError("plane tilt must satisfy |alpha| < 90 degrees")
        _check_albedo(self.albedo)

    def depth(self, y_ray: np.ndarray) -> np.ndarray:
        """Analytic z-buffer depth for rays with direction (., y_ray, 1)."""
        a = math.radians(self.alpha_deg)
        return self.z * math.cos(a) / (math.cos(a) - math.sin(a) * np.asarray(y_ray))


@dataclass(frozen=True)
class Pose:
    translation: tuple = (0.0, 0.0, 0.0)
    rotation_deg: tuple = (0.0, 0.0, 0.0)


def _check_albedo(a):
    a = np.asarray(a, dtype=float)
    if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
        raise InputError(f"albedo must be 3 values in [0, 1], got {a}")


def rotation_matrix(angles_rad):
    """Rotation R = Rz @ Ry @ Rx from Euler angles (arrays or tape Vars)."""
    from . import autodiff as ad
    rx, ry, rz = (ad.getitem(angles_rad, i) for i in range(3))
    cx, sx, cy, sy, cz, sz = ad.cos(rx), ad.sin(rx), ad.cos(ry), ad.sin(ry), ad.cos(rz), ad.sin(rz)
    rows = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-1.0 * sy, cy * sx, cy * cx],
    ]
    return ad.stack([ad.stack(r) for r in rows])


def box_triangles(lo, hi) -> np.ndarray:
    """Twelve outward-facing triangles of the axis-aligned box ``lo``-``hi`` (mm)."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InputError("box corners must be 3-vectors with hi > lo")
    v = np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                  for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    # vertex index = 4 * ix + 2 * iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    return np.array([v[list(t)] for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])


@dataclass(frozen=True, eq=False)
class Scene:
    """Triangle soup with per-face albedo plus an optional analytic plane.

    ``object_ids`` groups faces into objects; the object named by
    ``posed_object`` is moved by ``pose`` (rotation about its centroid).
    """

    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    albedo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    object_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    plane: Plane | None = None
    pose: Pose = field(default_factory=Pose)
    posed_object: int | None = None

    def __post_init__(self):
        tri = np.array(self.triangles, dtype=float).reshape(-1, 3, 3)
        alb = np.array(self.albedo, dtype=float).reshape(-1, 3)
        ids = np.array(self.object_ids, dtype=int).reshape(-1)
        if len(ids) == 0 and len(tri):
            ids = np.zeros(len(tri), dtype=int)
        if not (len(tri) == len(alb) == len(ids)):
            raise InputError("triangles, albedo and object_ids must have equal length")
        if not np.all(np.isfinite(tri)):
            raise InputError("scene vertices must be finite")
        if len(alb) and (np.any(alb < 0) or np.any(alb > 1)):
            raise InputError("albedo must lie in [0, 1]")
        for a in (tri, alb, ids):
            a.setflags(write=False)
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "albedo", alb)
        object.__setattr__(self, "object_ids", ids)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @classmethod
    def plane_scene(cls, z: float, alpha_deg: float = 0.0, albedo=(1.0, 1.0, 1.0)) -> Scene:
        return cls(plane=Plane(float(z), float(alpha_deg), tuple(float(a) for a in albedo)))

    def with_plane(self, **changes) -> Scene:
        return dataclasses.replace(self, plane=dataclasses.replace(self.plane, **changes))

    def with_pose(self, translation=None, rotation_deg=None) -> Scene:
        pose = Pose(tuple(translation if translation is not None else self.pose.translation),
                    tuple(rotation_deg if rotation_deg is not None else self.pose.rotation_deg))
        return dataclasses.replace(self, pose=pose)

    def pivot(self) -> np.ndarray:
        if self.posed_object is None:
            return np.zeros(3)
        sel = self.object_ids == self.posed_object
        if not sel.any():
            raise InputError(f"posed object {self.posed_object} has no faces")
        return self.triangles[sel].reshape(-1, 3).mean(axis=0)

    def posed_triangles(self, translation=None, rotation_rad=None):
        """Triangles with the pose applied to the designated object.

        Accepts Vars for ``translation``/``rotation_rad`` and then returns a
        Var holding only the posed object's faces, along with their indices.
        """
        from . import autodiff as ad
        if translation is None:
            translation = np.asarray(self.pose.translation, dtype=float)
        if rotation_rad is None:
            rotation_rad = np.radians(np.asarray(self.pose.rotation_deg, dtype=float))
        if self.posed_object is None:
            return self.triangles, np.zeros(0, dtype=int), None
        sel = np.flatnonzero(self.object_ids == self.posed_object)
        pivot = self.pivot()
        rot = rotation_matrix(rotation_rad)
        local = (self.triangles[sel] - pivot).reshape(-1, 3)
        moved = ad.matmul(local, ad.transpose(rot, (1, 0))) + pivot + ad.reshape(translation, (1, 3))
        moved = ad.reshape(moved, (len(sel), 3, 3))
        tri = np.array(self.triangles)
        tri[sel] = ad.value(moved)
        return tri, sel, moved

    # text format -----------------------------------------------------------
    def to_text(self) -> str:
        out = ["# depthsim scene"]
        if self.plane is not None:
            p = self.plane
            out.append(f"plane {p.z!r} {p.alpha_deg!r} " + " ".join(repr(float(a)) for a in p.albedo))
        for oid in np.unique(self.object_ids):
            sel = np.flatnonzero(self.object_ids == oid)
            out.append(f"object {int(oid)}" + (" posed" if oid == self.posed_object else ""))
            verts = self.triangles[sel].reshape(-1, 3)
            for v in verts:
                out.append("v " + " ".join(repr(float(c)) for c in v))
            for k, fi in enumerate(sel):
                a = self.albedo[fi]
                out.append(f"f {3 * k + 1} {3 * k + 2} {3 * k + 3} "
                           + " ".join(repr(float(c)) for c in a))
        t, r = self.pose.translation, self.pose.rotation_deg
        if self.posed_object is not None:
            out.append("pose " + " ".join(repr(float(c)) for c in (*t, *r)))
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Scene:
        """Parse the minimal mesh format.

        Lines: ``plane <z> <alpha_deg> [r g b]``; ``object <id> [posed]``;
        ``v x y z``; ``f i j k [r g b]`` (1-based indices into the current
        object's vertices, optional per-face albedo, default from
        ``albedo r g b``); ``pose tx ty tz rx ry rz``.
        """
        plane = None
        tris, albs, ids = [], [], []
        verts: list = []
        obj = 0
        obj_albedo = (1.0, 1.0, 1.0)
        posed = None
        pose = Pose()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                kind, args = tok[0], [float(x) for x in tok[1:] if x != "posed"]
                if kind == "plane":
                    alb = tuple(args[2:5]) if len(args) >= 5 else (1.0, 1.0, 1.0)
                    plane = Plane(args[0], args[1] if len(args) > 1 else 0.0, alb)
                elif kind == "object":
                    obj = int(args[0]) if args else obj + 1
                    verts = []
                    if "posed" in tok:
                        posed = obj
                elif kind == "albedo":
                    obj_albedo = tuple(args[:3])
                elif kind == "v":
                    verts.append(args[:3])
                elif kind == "f":
                    idx = [int(a) - 1 for a in args[:3]]
                    tris.append([verts[i] for i in idx])
                    albs.append(tuple(args[3:6]) if len(args) >= 6 else obj_albedo)
                    ids.append(obj)
                elif kind == "pose":
                    pose = Pose(tuple(args[:3]), tuple(args[3:6]))
                else:
                    raise InputError(f"unknown directive {kind!r}")
            except (ValueError, IndexError) as exc:
                raise InputError(f"scene line {lineno}: {raw!r}: {exc}") from exc
        return cls(np.array(tris, dtype=float).reshape(-1, 3, 3), np.array(albs).reshape(-1, 3),
                   np.array(ids, dtype=int), plane, pose, posed)

    @classmethod
    def load(cls, path) -> Scene:
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


# ---------------------------------------------------------------------------
# parameter set
# ---------------------------------------------------------------------------

PARAMETER_NAMES = (
    "shadow_bias", "shadow_steepness", "emitter_intensity", "noise_mean", "noise_std",
    "temperature", "pattern", "plane_z", "plane_tilt", "pose_translation", "pose_rotation",
    "depth_noise_mean", "depth_noise_std", "conv_w1", "conv_b1", "conv_w2", "conv_b2",
)


@dataclass
class Parameter:
    value: np.ndarray
    differentiable: bool = False


class ParameterSet:
    """Named simulation parameters, each with a differentiability flag.

    Angles are stored in radians (``plane_tilt``, ``pose_rotation``); the
    scene types keep degrees for readability.
    """

    def __init__(self, entries: dict[str, Parameter] | None = None):
        self._entries: dict[str, Parameter] = {}
        for name, p in (entries or {}).items():
            self.set(name, p.value, p.differentiable)

    @classmethod
    def from_components(cls, cfg: SensorConfig, scene: Scene | None = None,
                        pattern: PatternImage | None = None, postprocessor=None,
                        flags=()) -> ParameterSet:
        ps = cls()
        ps.set("shadow_bias", cfg.shadow_bias)
        ps.set("shadow_steepness", cfg.shadow_steepness)
        ps.set("emitter_intensity", cfg.emitter_intensity)
        ps.set("noise_mean", cfg.noise_mean)
        ps.set("noise_std", cfg.noise_std)
        ps.set("temperature", cfg.temperature)
        if pattern is not None:
            ps.set("pattern", pattern.values)
        if scene is not None and scene.plane is not None:
            ps.set("plane_z", scene.plane.z)
            ps.set("plane_tilt", math.radians(scene.plane.alpha_deg))
        if scene is not None and scene.posed_object is not None:
            ps.set("pose_translation", np.asarray(scene.pose.translation, dtype=float))
            ps.set("pose_rotation", np.radians(np.asarray(scene.pose.rotation_deg, dtype=float)))
        if postprocessor is not None:
            for name, val in postprocessor.parameters().items():
                ps.set(name, val)
        for name in flags:
            ps.flag(name)
        return ps

    def set(self, name: str, val, differentiable: bool | None = None) -> None:
        if name not in PARAMETER_NAMES:
            raise ConfigurationError(f"unknown parameter {name!r}")
        old = self._entries.get(name)
        flag = differentiable if differentiable is not None else (old.differentiable if old else False)
        self._entries[name] = Parameter(np.array(val, dtype=float), bool(flag))

    def flag(self, name: str, differentiable: bool = True) -> None:
        if name not in self._entries:
            raise ConfigurationError(f"parameter {name!r} not present")
        self._entries[name].differentiable = differentiable

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __getitem__(self, name) -> np.ndarray:
        return self._entries[name].value

    def __iter__(self):
        return iter(self._entries)

    def items(self):
        return ((k, p.value) for k, p in self._entries.items())

    @property
    def flagged(self) -> list[str]:
        return [k for k, p in self._entries.items() if p.differentiable]

    def copy(self) -> ParameterSet:
        return ParameterSet({k: Parameter(p.value.copy(), p.differentiable)
                             for k, p in self._entries.items()})

    def bind(self, tape=None) -> dict:
        """Values for the pipeline: flagged entries become tape leaves."""
        out = {}
        for k, p in self._entries.items():
            out[k] = tape.parameter(p.value, k) if (tape is not None and p.differentiable) else p.value
        return out
