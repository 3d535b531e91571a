"""End-to-end acceptance criteria, each reported as one PASS/FAIL line."""
import time

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from depthsim import (NoiseStudyGrid, ParameterSet, PatternImage, Plane, ReferenceScan, Scene, block_match,
                      box_triangles, calibrate, disparity_range, noise_study, optimize_pattern,
                      optimize_scene_pose, preset, render_capture, render_reference_patterns, run_gradcheck,
                      simulate, strip_split_match)
from depthsim.cli import main
from depthsim.stereo import match_images


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst, runs = 0.0, []
    for size, tilt in [(8, 0.0), (16, 10.0), (32, 0.0), (32, 10.0)]:
        rep = run_gradcheck("kinect_v1", size, tilt_deg=tilt, n_samples=32)
        assert rep.checked["pattern"] == 32 and rep.checked["conv_w1"] == 32
        worst = max(worst, *rep.errors.values())
        runs.append(f"{size}px/{tilt:g}deg")
    dt = time.perf_counter() - t0
    acceptance(1, "gradients match central differences", worst < 1e-4 and dt < 300,
               f"max rel err {worst:.2e} over {', '.join(runs)}; {dt:.0f} s")


def test_disparity_range_oracle(acceptance):
    cfg = preset("kinect_v1")
    d = disparity_range(cfg)
    z = cfg.fb / d[1]
    acceptance(2, "kinect disparity range", d == (11, 107) and abs(z - 401.22) <= 0.01,
               f"range {d}, depth at d_max {z:.3f} mm")


def _plateau_step(cfg, pattern, refs, z0=1000.0):
    """Depth spacing of the two label plateaus bracketing z0 over a sweep of frontal planes."""
    n = cfg.subpixel_levels
    plateaus = set()
    for z in np.linspace(z0 - 60.0, z0 + 60.0, 49):
        r = simulate(Scene.plane_scene(z), cfg, pattern, references=refs)
        d = cfg.fb / np.median(np.asarray(r.depth)[r.valid])
        if abs(d * n - round(d * n)) < 0.05:
            plateaus.add(round(d * n) / n)
    depths = np.sort(cfg.fb / np.array(sorted(plateaus)))
    k = np.searchsorted(depths, z0)
    return depths[k] - depths[k - 1]


def test_quantization(acceptance):
    base = preset("kinect_v1").replace(width=128, height=48, z_min=700.0, z_max=1400.0)
    cfg1 = base.replace(subpixel_levels=1)
    pat = PatternImage.for_sensor(base, seed=0)
    refs1 = render_reference_patterns(cfg1, pat)
    r = simulate(Scene.plane_scene(1000.0), cfg1, pat, references=refs1)
    d = cfg1.fb / np.asarray(r.depth)[r.valid]
    off = float(np.max(np.abs(d - np.round(d))))
    step1 = _plateau_step(cfg1, pat, refs1)
    step2 = _plateau_step(base, pat, render_reference_patterns(base, pat))
    ok = off <= 0.05 and abs(step1 - 23.3) <= 0.15 * 23.3 and abs(step2 - step1 / 2) <= 0.2 * step1 / 2
    acceptance(3, "depth quantization", ok,
               f"max off-label {off:.4f} px, step n_sub=1 {step1:.2f} mm, n_sub=2 {step2:.2f} mm")


def _hard_zncc(left, right, shifts, block):
    lw = sliding_window_view(left, (block, block))
    lw = lw - lw.mean(axis=(-1, -2), keepdims=True)
    out = []
    for s in shifts:
        moved = np.full_like(right, np.nan)
        moved[:, s:] = right[:, :right.shape[1] - s]
        rw = sliding_window_view(moved, (block, block))
        rw = rw - rw.mean(axis=(-1, -2), keepdims=True)
        out.append((lw * rw).sum((-1, -2)) / np.sqrt((lw * lw).sum((-1, -2)) * (rw * rw).sum((-1, -2))))
    return np.stack(out, axis=-1)


def test_block_matching_oracle(acceptance):
    rng = np.random.default_rng(0)
    block, shifts, rad = 9, range(9), 4
    agree = total = 0
    for _ in range(50):
        k = int(rng.integers(0, 8))
        wide = rng.random((32, 40))
        left, right = np.roll(wide, k, axis=1)[:, 8:], wide[:, 8:]
        dm = match_images(left, right, (0, 8), block, 50.0, confidence_threshold=-1.0)
        cost = _hard_zncc(left, right, shifts, block)
        top = np.sort(cost, axis=-1)
        unambiguous = np.all(np.isfinite(cost), axis=-1) & (top[..., -1] - top[..., -2] >= 0.05)
        hard = np.argmax(np.nan_to_num(cost, nan=-2.0), axis=-1)
        soft = dm.disparity[rad:-rad, rad:-rad]
        m = unambiguous & dm.valid[rad:-rad, rad:-rad]
        agree += int(np.sum(np.abs(soft - hard)[m] <= 0.5))
        total += int(m.sum())
    frac = agree / total
    acceptance(4, "soft vs hard block matching", total > 0 and frac >= 0.95,
               f"{agree}/{total} unambiguous pixels agree ({frac:.4f})")


def test_strip_parallelism(acceptance):
    cfg = preset("kinect_v1").replace(width=128, height=128, z_min=700.0, z_max=1400.0)
    pat = PatternImage.for_sensor(cfg, seed=1)
    refs = render_reference_patterns(cfg, pat)
    cap = render_capture(Scene.plane_scene(1000.0, 25.0), cfg, pat).intensity
    ref = block_match(cap, refs, cfg)
    same = []
    for m in (1, 2, 4):
        for threads in (1, 4):
            dm = strip_split_match(cap, refs, cfg, m, threads)
            same.append(dm.disparity.tobytes() == ref.disparity.tobytes()
                        and dm.valid.tobytes() == ref.valid.tobytes()
                        and dm.confidence.tobytes() == ref.confidence.tobytes())
    acceptance(5, "strip-split matching is bitwise identical", all(same), f"{sum(same)}/6 combinations equal")


def _local_maxima(p):
    p = p[np.isfinite(p)]
    return int(np.sum((p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])))


def test_noise_study_trends(acceptance):
    cfg = preset("kinect_v1").replace(width=320, height=240, noise_std=0.005)
    t0 = time.perf_counter()
    dist = noise_study(cfg, NoiseStudyGrid((1000.0, 2000.0, 3000.0, 4000.0), (0.0,)))
    tilt = noise_study(cfg, NoiseStudyGrid((1500.0,), (0.0, 40.0, 70.0)))
    dt = time.perf_counter() - t0
    s_z = [dist.cells[(z, 0.0)][0] for z in (1000.0, 2000.0, 3000.0, 4000.0)]
    s_a = [tilt.cells[(1500.0, a)][0] for a in (0.0, 40.0, 70.0)]
    maxima = [_local_maxima(dist.profile(z, 0.0)) for z in (2000.0, 3000.0, 4000.0)]
    ok = bool(np.all(np.diff(s_z) > 0) and np.all(np.diff(s_a) > 0) and min(maxima) >= 2 and dt < 600)
    acceptance(6, "noise-study trends", ok,
               f"std vs z {np.round(s_z, 2).tolist()}, vs alpha {np.round(s_a, 2).tolist()}, "
               f"radial maxima {maxima}; {dt:.0f} s")


def test_toy_pose(acceptance):
    cfg = preset("kinect_v1").replace(width=64, height=64, z_min=700.0, z_max=1400.0, noise_std=1.0)
    pat = PatternImage.for_sensor(cfg, seed=0)
    res = optimize_scene_pose(Scene.plane_scene(1000.0, 40.0), cfg, pat, iterations=500, lr=0.01)
    hit = np.flatnonzero(np.abs(res.tilt_deg) < 5.0)
    acceptance(7, "tilted plane rotated back", hit.size > 0,
               f"|alpha| < 5 deg first at iteration {hit[0] if hit.size else None}, final {res.tilt_deg[-1]:.2f} deg")


TOY_C = {"noise_std": 0.3, "amplitude": 0.1, "lr": 0.03, "noise_samples": 4}


def test_toy_pattern(acceptance):
    cfg = preset("kinect_v1").replace(width=64, height=64, z_min=700.0, z_max=1400.0, noise_std=TOY_C["noise_std"])
    shape = PatternImage.for_sensor(cfg, channels=3).values.shape
    pat = PatternImage(np.random.default_rng(0).uniform(0.0, TOY_C["amplitude"], shape))
    scene = Scene.plane_scene(1000.0, 20.0, albedo=(1.0, 0.0, 0.0))
    res = optimize_pattern(scene, cfg, pat, iterations=500, lr=TOY_C["lr"], noise_samples=TOY_C["noise_samples"])
    before, after = res.footprint_fractions()
    acceptance(8, "red share of pattern energy doubles", after[0] >= 2 * before[0],
               f"lit-footprint shares {np.round(before, 3).tolist()} -> {np.round(after, 3).tolist()}")


def _posts_scene(cfg, z_plane=480.0, z_top=420.0):
    """A 4x3 grid of 12 mm square posts standing 60 mm proud of a back plane."""
    tris = []
    for cx in np.linspace(-0.28, 0.28, 4) * cfg.width * z_plane / cfg.focal_length:
        for cy in np.linspace(-0.25, 0.25, 3) * cfg.height * z_plane / cfg.focal_length:
            tris.append(box_triangles([cx - 6, cy - 6, z_top], [cx + 6, cy + 6, z_plane]))
    tri = np.concatenate(tris)
    return Scene(tri, np.full((len(tri), 3), 0.5), plane=Plane(z_plane, 0.0, (0.5, 0.5, 0.5)))


def test_calibration_recovery(acceptance):
    cfg = preset("kinect_v1").replace(width=128, height=96, noise_std=0.02)
    pat = PatternImage.for_sensor(cfg, seed=0)
    scene = _posts_scene(cfg)
    r = simulate(scene, cfg, pat, seed=0)
    scan = ReferenceScan(scene, np.asarray(r.depth), r.valid)
    ps = ParameterSet.from_components(cfg, scene, pat)
    ps.set("shadow_bias", 1.0)
    ps.set("noise_std", 0.001)
    res = calibrate(cfg, pat, [scan], ps, ["shadow_bias", "noise_std"], iterations=250,
                    lr={"shadow_bias": 1.0, "noise_std": 0.002}, lr_decay=0.99, seed=0)
    xi, sigma = float(res.params["shadow_bias"]), float(res.params["noise_std"])
    ok = abs(xi - 5.0) <= 0.5 and abs(sigma - 0.02) <= 0.004
    acceptance(9, "calibration recovers xi and sigma_n", ok, f"xi {xi:.3f} mm, sigma_n {sigma:.5f}")


def test_determinism(acceptance, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("width = 96\nheight = 64\nz_min = 700\nz_max = 1400\nnoise_std = 0.02\n")
    scene = tmp_path / "s.scene"
    Scene.plane_scene(1000.0, 15.0).save(scene)
    files = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["render", "--config", str(cfg), "--scene", str(scene), "--seed", "7", "--out", str(out)]) == 0
        assert main(["noise-study", "--config", str(cfg), "--z", "900,1200", "--bins", "4", "--seed", "7",
                     "--out", str(out)]) == 0
        assert main(["calibrate", "--config", str(cfg), "--scan", f"{scene}:{out / 'depth.pfm'}",
                     "--fit", "noise_std", "--iterations", "2", "--seed", "7", "--out", str(out)]) == 0
        files[run] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    same = [n for n in files["a"] if files["a"][n] == files["b"].get(n)]
    acceptance(10, "bitwise determinism", len(same) == len(files["a"]) == len(files["b"]),
               f"{len(same)}/{len(files['a'])} output files identical")
