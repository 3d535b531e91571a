"""Emitter -> scene -> camera light path.

Visibility (which primitive each ray hits, and whether the emitter ray is
blocked) is resolved numerically and carries no gradient.  Everything
downstream of it -- hit depths on the plane and on the posed object,
emitter projection, soft shadow term, pattern lookup and shading -- is
built from :mod:`depthsim.autodiff` primitives and differentiates with
respect to whichever entries of the parameter mapping are tape variables.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import ParameterSet, PatternImage, Scene, SensorConfig

__all__ = [
    "BVH", "HitRecord", "CaptureImage", "EmitterProjection", "ReferencePatterns",
    "trace_primary", "project_to_emitter", "shadow_factor", "render_capture",
    "render_reference_patterns", "camera_rays",
]

_T_EPS = 1e-9


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

class BVH:
    """Axis-aligned bounding volume hierarchy over a triangle array.

    Built by median split on the widest centroid axis; traversal is a
    breadth-first wavefront over (ray, node) pairs so that it vectorizes.
    """

    def __init__(self, triangles: np.ndarray, leaf_size: int = 4):
        self.triangles = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
        n = len(self.triangles)
        self.lo: list = []
        self.hi: list = []
        self.left: list = []
        self.right: list = []
        self.start: list = []
        self.count: list = []
        self.order = np.arange(n)
        if n:
            cent = self.triangles.mean(axis=1)
            self._build(np.arange(n), cent, leaf_size)
            self.order = np.concatenate(self._leaf_items)
        self.lo = np.array(self.lo).reshape(-1, 3)
        self.hi = np.array(self.hi).reshape(-1, 3)
        self.left = np.array(self.left, dtype=np.int64)
        self.right = np.array(self.right, dtype=np.int64)
        self.start = np.array(self.start, dtype=np.int64)
        self.count = np.array(self.count, dtype=np.int64)

    _leaf_items: list

    def _build(self, items, cent, leaf_size):
        if not hasattr(self, "_leaf_items"):
            self._leaf_items = []
            self._n_leaf = 0
        node = len(self.lo)
        pts = self.triangles[items].reshape(-1, 3)
        self.lo.append(pts.min(axis=0))
        self.hi.append(pts.max(axis=0))
        self.left.append(-1)
        self.right.append(-1)
        self.start.append(0)
        self.count.append(0)
        if len(items) <= leaf_size:
            self.start[node] = self._n_leaf
            self.count[node] = len(items)
            self._leaf_items.append(np.sort(items))
            self._n_leaf += len(items)
            return node
        c = cent[items]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = items[np.argsort(c[:, axis], kind="stable")]
        half = len(srt) // 2
        self.left[node] = self._build(srt[:half], cent, leaf_size)
        self.right[node] = self._build(srt[half:], cent, leaf_size)
        return node

    def intersect(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = _T_EPS):
        """Nearest hit per ray as (t, triangle index); misses give (inf, -1)."""
        dirs = np.asarray(dirs, dtype=float)
        n = len(dirs)
        origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, dtype=np.int64)
        if len(self.triangles) == 0 or n == 0:
            return best_t, best_id
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        ray = np.arange(n)
        node = np.zeros(n, dtype=np.int64)
        while ray.size:
            with np.errstate(invalid="ignore"):
                t1 = (self.lo[node] - origins[ray]) * inv[ray]
                t2 = (self.hi[node] - origins[ray]) * inv[ray]
            tnear = np.fmax.reduce(np.fmin(t1, t2), axis=1)
            tfar = np.fmin.reduce(np.fmax(t1, t2), axis=1)
            keep = (tfar >= np.maximum(tnear, t_min)) & (tnear <= best_t[ray])
            ray, node = ray[keep], node[keep]
            leaf = self.left[node] < 0
            lr, ln = ray[leaf], node[leaf]
            if lr.size:
                cnt = self.count[ln]
                rr = np.repeat(lr, cnt)
                first = np.repeat(self.start[ln], cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri = self.order[first + offs]
                t, ok = moller_trumbore(self.triangles[tri], origins[rr], dirs[rr], t_min)
                _merge_best(best_t, best_id, rr[ok], t[ok], tri[ok])
            inner = ~leaf
            ray = np.concatenate([ray[inner], ray[inner]])
            node = np.concatenate([self.left[node[inner]], self.right[node[inner]]])
        return best_t, best_id


def _merge_best(best_t, best_id, ray, t, ids):
    """Fold candidate hits in, preferring smaller t then lower primitive index."""
    if ray.size == 0:
        return
    order = np.lexsort((ids, t, ray))
    ray, t, ids = ray[order], t[order], ids[order]
    first = np.ones(len(ray), dtype=bool)
    first[1:] = ray[1:] != ray[:-1]
    ray, t, ids = ray[first], t[first], ids[first]
    better = (t < best_t[ray]) | ((t == best_t[ray]) & (ids < best_id[ray]))
    best_t[ray[better]] = t[better]
    best_id[ray[better]] = ids[better]


def moller_trumbore(tri: np.ndarray, o: np.ndarray, d: np.ndarray, t_min: float = _T_EPS):
    """Edge-inclusive ray/triangle test; returns (t, hit mask)."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
    return t, ok


def _plane_normal(alpha_rad):
    return np.array([0.0, -math.sin(alpha_rad), math.cos(alpha_rad)])


def _intersect_plane(z, alpha_rad, origins, dirs, t_min=_T_EPS):
    n = _plane_normal(alpha_rad)
    p0 = np.array([0.0, 0.0, z])
    denom = dirs @ n
    num = (p0 - origins) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > t_min), t, np.inf)
    return t


def _scene_geometry(scene: Scene, params: dict | None):
    """Numeric posed triangles and plane (z, alpha_rad) at the current parameter values."""
    plane = None
    if scene.plane is not None:
        z = float(ad.value(params["plane_z"])) if params and "plane_z" in params else scene.plane.z
        a = (float(ad.value(params["plane_tilt"])) if params and "plane_tilt" in params
             else math.radians(scene.plane.alpha_deg))
        plane = (z, a)
    tr = rot = None
    if params and scene.posed_object is not None:
        tr = ad.value(params.get("pose_translation")) if "pose_translation" in params else None
        rot = ad.value(params.get("pose_rotation")) if "pose_rotation" in params else None
    tris, _, _ = scene.posed_triangles(tr, rot)
    return np.asarray(tris), plane


def _cast(bvh: BVH, plane, origins, dirs, n_tri):
    t, ids = bvh.intersect(origins, dirs)
    if plane is not None:
        tp = _intersect_plane(plane[0], plane[1], np.broadcast_to(origins, dirs.shape), dirs)
        # plane index n_tri loses exact ties to any triangle
        take = tp < t
        t = np.where(take, tp, t)
        ids = np.where(take, n_tri, ids)
    return t, ids


def camera_rays(cfg: SensorConfig, samples: int = 1) -> np.ndarray:
    """Ray directions (z = 1) for ``samples`` x ``samples`` points per pixel.

    Layout is (H, W, samples**2, 3) flattened to (N, 3), pixel-major.
    """
    cx, cy = cfg.principal_point
    off = (np.arange(samples) + 0.5) / samples - 0.5
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width]
    px = xs[:, :, None] + ox.reshape(1, 1, -1)
    py = ys[:, :, None] + oy.reshape(1, 1, -1)
    d = np.stack([(px - cx) / cfg.focal_length, (py - cy) / cfg.focal_length,
                  np.ones_like(px, dtype=float)], axis=-1)
    return d.reshape(-1, 3)


@dataclass
class HitRecord:
    """Per-ray nearest-hit record (numeric)."""

    points: np.ndarray     # (N, 3) camera-space hit points
    normals: np.ndarray    # (N, 3) unit normals facing the camera
    albedo: np.ndarray     # (N, 3)
    depth: np.ndarray      # (N,) camera z (z-buffer convention); 0 on misses
    prim: np.ndarray       # (N,) primitive id; n_triangles denotes the plane; -1 miss
    mask: np.ndarray       # (N,) bool

    def image(self, cfg: SensorConfig, field: str = "depth") -> np.ndarray:
        """Reshape a per-ray field of a one-sample-per-pixel trace to image layout."""
        a = getattr(self, field)
        return a.reshape((cfg.height, cfg.width) + a.shape[1:])


def trace_primary(scene: Scene, cfg: SensorConfig, samples: int = 1, params: dict | None = None,
                  threads: int = 1) -> HitRecord:
    """Closest intersection for each camera ray (``samples``^2 rays per pixel)."""
    tris, plane = _scene_geometry(scene, params)
    bvh = BVH(tris)
    dirs = camera_rays(cfg, samples)
    origin = np.zeros(3)
    n_tri = len(tris)
    if threads > 1 and len(dirs) > 4096:
        chunks = np.array_split(np.arange(len(dirs)), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _cast(bvh, plane, origin, dirs[c], n_tri), chunks))
        t = np.concatenate([p[0] for p in parts])
        ids = np.concatenate([p[1] for p in parts])
    else:
        t, ids = _cast(bvh, plane, origin, dirs, n_tri)
    mask = ids >= 0
    ids = np.where(mask, ids, -1)
    t = np.where(mask, t, 0.0)
    pts = t[:, None] * dirs
    normals = np.zeros_like(dirs)
    albedo = np.zeros_like(dirs)
    tri_hit = mask & (ids < n_tri)
    if tri_hit.any():
        tsel = tris[ids[tri_hit]]
        nrm = np.cross(tsel[:, 1] - tsel[:, 0], tsel[:, 2] - tsel[:, 0])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        flip = np.einsum("ij,ij->i", nrm, dirs[tri_hit]) > 0
        nrm[flip] *= -1
        normals[tri_hit] = nrm
        albedo[tri_hit] = scene.albedo[ids[tri_hit]]
    pl_hit = mask & (ids == n_tri)
    if pl_hit.any():
        nrm = _plane_normal(plane[1])
        nrm = np.where(nrm @ np.array([0, 0, 1.0]) > 0, -nrm, nrm)
        normals[pl_hit] = nrm
        albedo[pl_hit] = scene.plane.albedo
    return HitRecord(pts, normals, albedo, t, ids, mask)


# ---------------------------------------------------------------------------
# emitter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmitterProjection:
    """3x4 matrix mapping camera-space points to emitter image coordinates."""

    matrix: np.ndarray

    @classmethod
    def from_config(cls, cfg: SensorConfig) -> EmitterProjection:
        f = cfg.focal_length
        cx, cy = cfg.principal_point
        m = np.array([[f, 0.0, cx, -f * cfg.baseline],
                      [0.0, f, cy, 0.0],
                      [0.0, 0.0, 1.0, 0.0]])
        return cls(m)


def project_to_emitter(points, proj: EmitterProjection):
    """Project (N, 3) camera-space points (array or Var) to (x_e, y_e, z_e, valid).

    ``z_e`` is the depth along the emitter axis; points with z_e <= 0 are
    behind the emitter and flagged invalid.
    """
    m = proj.matrix
    px, py, pz = (ad.getitem(points, (slice(None), i)) for i in range(3))
    u = px * m[0, 0] + pz * m[0, 2] + m[0, 3]
    v = py * m[1, 1] + pz * m[1, 2] + m[1, 3]
    w = pz * m[2, 2] + m[2, 3]
    valid = ad.value(w) > 0
    safe_w = ad.where(valid, w, 1.0)
    return u / safe_w, v / safe_w, w, valid


def shadow_factor(depth_gap, bias, steepness=1.0):
    """Soft visibility ``1 - sigmoid(steepness * (depth_gap - bias))``.

    ``depth_gap`` is z_e minus the depth of the first surface on the
    emitter ray (0 for an unoccluded point).
    """
    return ad.sigmoid(steepness * (bias - depth_gap))


def _occluder_depth(bvh: BVH, plane, n_tri, emitter, points, prim):
    """Emitter-axis depth of the first surface on each emitter->point ray (numeric)."""
    d = points - emitter
    t, ids = _cast(bvh, plane, emitter, d, n_tri)
    occluded = (ids != prim) & (ids >= 0) & (t < 1.0 - 1e-7)
    zhat = np.where(occluded, emitter[2] + t * d[:, 2], points[:, 2])
    return occluded, zhat


# ---------------------------------------------------------------------------
# capture
# ---------------------------------------------------------------------------

@dataclass
class CaptureImage:
    """Rendered pattern capture plus ground-truth buffers.

    ``intensity`` (H, W, C) and ``gt_depth``/``shadow_map`` (H, W) are Vars
    when rendering under a tape with differentiable parameters.
    """

    intensity: object
    gt_depth: object
    shadow_map: object
    hit_mask: np.ndarray

    def numpy(self) -> CaptureImage:
        return CaptureImage(np.asarray(ad.value(self.intensity)), np.asarray(ad.value(self.gt_depth)),
                            np.asarray(ad.value(self.shadow_map)), self.hit_mask)


def _param(params, name, default):
    return params[name] if params is not None and name in params else default


def _diff_depth(scene, params, hit: HitRecord, dirs, sel):
    """Camera depth of selected hits, recomputed differentiably where the geometry is a parameter."""
    n_tri = scene.n_triangles
    prim = hit.prim[sel]
    t_const = hit.depth[sel].copy()
    out = t_const
    d = dirs[sel]
    has_plane_param = params is not None and ("plane_z" in params or "plane_tilt" in params)
    plane_rows = np.flatnonzero(prim == scene.n_triangles) if scene.plane is not None else np.zeros(0, int)
    if has_plane_param and plane_rows.size and (ad.is_var(params.get("plane_z")) or ad.is_var(params.get("plane_tilt"))):
        z = _param(params, "plane_z", scene.plane.z)
        a = _param(params, "plane_tilt", math.radians(scene.plane.alpha_deg))
        dy = d[plane_rows, 1]
        ca, sa = ad.cos(a), ad.sin(a)
        tp = z * ca / (ca - sa * dy)
        out = ad.where(np.isin(np.arange(len(prim)), plane_rows),
                       ad.scatter(tp, plane_rows, len(prim)), out)
    if scene.posed_object is not None and params is not None and (
            ad.is_var(params.get("pose_translation")) or ad.is_var(params.get("pose_rotation"))):
        _, faces, moved = scene.posed_triangles(params.get("pose_translation"), params.get("pose_rotation"))
        local = np.full(max(n_tri, 1), -1)
        local[faces] = np.arange(len(faces))
        rows = np.flatnonzero((prim >= 0) & (prim < scene.n_triangles))
        rows = rows[local[prim[rows]] >= 0] if rows.size else rows
        if rows.size:
            tri = ad.getitem(moved, local[prim[rows]])
            v0 = ad.getitem(tri, (slice(None), 0))
            e1 = ad.getitem(tri, (slice(None), 1)) - v0
            e2 = ad.getitem(tri, (slice(None), 2)) - v0
            nrm = ad.cross3(e1, e2)
            to = ad.dot3(nrm, v0) / ad.dot3(nrm, d[rows])
            out = ad.where(np.isin(np.arange(len(prim)), rows), ad.scatter(to, rows, len(prim)), out)
    return out


def _diff_normals(scene, params, hit: HitRecord, sel):
    normals = hit.normals[sel]
    prim = hit.prim[sel]
    if scene.plane is None or params is None or not ad.is_var(params.get("plane_tilt")):
        out = normals
    else:
        rows = np.flatnonzero(prim == scene.n_triangles)
        a = params["plane_tilt"]
        # camera-facing plane normal (cos a > 0 for |a| < 90 deg)
        pn = ad.stack([ad.sin(a) * 0.0, ad.sin(a), -1.0 * ad.cos(a)])
        mask = np.zeros((len(prim), 1), dtype=bool)
        mask[rows] = True
        out = ad.where(mask, ad.reshape(pn, (1, 3)) + np.zeros((len(prim), 3)), normals)
    if scene.posed_object is not None and params is not None and ad.is_var(params.get("pose_rotation")):
        _, faces, moved = scene.posed_triangles(params.get("pose_translation"), params.get("pose_rotation"))
        local = np.full(max(scene.n_triangles, 1), -1)
        local[faces] = np.arange(len(faces))
        rows = np.flatnonzero((prim >= 0) & (prim < scene.n_triangles))
        rows = rows[local[prim[rows]] >= 0] if rows.size else rows
        if rows.size:
            tri = ad.getitem(moved, local[prim[rows]])
            v0 = ad.getitem(tri, (slice(None), 0))
            nrm = ad.cross3(ad.getitem(tri, (slice(None), 1)) - v0, ad.getitem(tri, (slice(None), 2)) - v0)
            nrm = nrm / ad.reshape(ad.sqrt(ad.dot3(nrm, nrm)), (-1, 1))
            sign = np.sign(np.einsum("ij,ij->i", ad.value(nrm), normals[rows]))
            nrm = nrm * sign[:, None]
            mask = np.zeros((len(prim), 1), dtype=bool)
            mask[rows] = True
            out = ad.where(mask, ad.scatter(nrm, rows, len(prim)), out)
    return out


def render_capture(scene: Scene, cfg: SensorConfig, pattern: PatternImage, params: dict | None = None,
                   samples: int | None = None, threads: int = 1) -> CaptureImage:
    """Render the camera's view of the projected pattern.

    ``params`` maps parameter names to values or tape variables (see
    :meth:`ParameterSet.bind`); missing entries fall back to ``cfg``,
    ``scene`` and ``pattern``.
    """
    if params is None:
        params = ParameterSet.from_components(cfg, scene, pattern).bind()
    s = cfg.supersampling if samples is None else samples
    h, w = cfg.height, cfg.width
    pat = _param(params, "pattern", pattern.values)
    n_ch = ad.value(pat).shape[2]

    # ground-truth z-buffer at pixel centres
    centre = trace_primary(scene, cfg, 1, params, threads)
    cdirs = camera_rays(cfg, 1)
    csel = np.flatnonzero(centre.mask)
    gt = np.zeros(h * w)
    if csel.size:
        gt = ad.where(centre.mask, ad.scatter(_diff_depth(scene, params, centre, cdirs, csel), csel, h * w), 0.0)
    gt_depth = ad.reshape(gt, (h, w))
    hit_mask = centre.mask.reshape(h, w)

    hit = trace_primary(scene, cfg, s, params, threads)
    dirs = camera_rays(cfg, s)
    n = len(dirs)
    sel = np.flatnonzero(hit.mask)
    if sel.size == 0:
        return CaptureImage(np.zeros((h, w, n_ch)), gt_depth, np.zeros((h, w)), hit_mask)

    t = _diff_depth(scene, params, hit, dirs, sel)
    pts = ad.reshape(t, (-1, 1)) * dirs[sel]
    nrm = _diff_normals(scene, params, hit, sel)

    proj = EmitterProjection.from_config(cfg)
    xe, ye, ze, _ = project_to_emitter(pts, proj)
    # pattern is centred on the emitter principal point
    off_x = (ad.value(pat).shape[1] - w) / 2.0
    off_y = (ad.value(pat).shape[0] - h) / 2.0

    # occlusion of the emitter ray is visibility: numeric, no gradient
    tris, plane = _scene_geometry(scene, params)
    emitter = np.array([cfg.baseline, 0.0, 0.0])
    occluded, zhat = _occluder_depth(BVH(tris), plane, len(tris), emitter, hit.points[sel], hit.prim[sel])
    gap = ad.where(occluded, ze - zhat, 0.0)
    vis = shadow_factor(gap, _param(params, "shadow_bias", cfg.shadow_bias),
                        _param(params, "shadow_steepness", cfg.shadow_steepness))

    to_light = emitter - pts
    dist = ad.sqrt(ad.dot3(to_light, to_light))
    cos_term = ad.relu(ad.dot3(nrm, to_light) / dist)
    eta = _param(params, "emitter_intensity", cfg.emitter_intensity)
    radiance = eta * vis * cos_term / (ze * ze)

    gamma = ad.bilinear(pat, xe + off_x, ye + off_y)
    albedo = hit.albedo[sel]
    if n_ch == 1:
        albedo = albedo.mean(axis=1, keepdims=True)
    lit = albedo * gamma * ad.reshape(radiance, (-1, 1))
    if cfg.ambient:
        lit = lit + cfg.ambient * albedo
    img = ad.scatter(lit, sel, n)
    intensity = ad.mean(ad.reshape(img, (h, w, s * s, n_ch)), axis=2)
    shadow = ad.mean(ad.reshape(ad.scatter(vis, sel, n), (h, w, s * s)), axis=2)
    return CaptureImage(intensity, gt_depth, shadow, hit_mask)


@dataclass
class ReferencePatterns:
    """Lookup table of reference captures of a fronto-parallel white plane.

    ``images[i]`` is rendered at disparity ``base_disparity + i / levels``.
    """

    images: list
    base_disparity: int
    levels: int


_SCENE_KEYS = ("plane_z", "plane_tilt", "pose_translation", "pose_rotation")


def render_reference_patterns(cfg: SensorConfig, pattern: PatternImage, params: dict | None = None,
                              base_disparity: int | None = None, samples: int | None = None) -> ReferencePatterns:
    """Pre-render the ``cfg.subpixel_levels`` shifted reference patterns."""
    base = cfg.disparity_bounds[0] if base_disparity is None else int(base_disparity)
    if params is None:
        params = ParameterSet.from_components(cfg, None, pattern).bind()
    sensor_params = {k: v for k, v in params.items() if k not in _SCENE_KEYS}
    n = cfg.subpixel_levels
    images = []
    for i in range(n):
        z = cfg.fb / (base + i / n)
        cap = render_capture(Scene.plane_scene(z), cfg, pattern, sensor_params, samples)
        images.append(cap.intensity)
    return ReferencePatterns(images, base, n)
