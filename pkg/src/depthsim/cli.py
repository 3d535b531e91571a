"""Command-line interface.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.  Errors
are reported on stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import PARAMETER_NAMES, ParameterSet, PatternImage, Scene, SensorConfig, preset
from .exceptions import ConfigurationError, ContractError, DepthSimError, InputError, NumericalError
from .harness import NoiseStudyGrid, match_pair, noise_study, run_gradcheck, write_reference_curves
from .io import read_depth_png, read_image, read_pfm, write_csv, write_depth_png, write_pfm
from .noise import POSTPROCESS_MODES, ConvPostProcessor
from .optim import LossSpec, ReferenceScan, calibrate, optimize_pattern, optimize_scene_pose
from .pipeline import simulate

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
# fitted scalars that are also sensor configuration fields
_CONFIG_SCALARS = ("shadow_bias", "shadow_steepness", "emitter_intensity", "noise_mean", "noise_std",
                   "temperature")


class UsageError(DepthSimError):
    """Bad command-line arguments."""


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": message})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="sensor configuration file (key = value)")
    g.add_argument("--preset", default="kinect_v1", help="sensor preset (default kinect_v1)")
    g.add_argument("--seed", type=_seed, default=0, help="random seed (unsigned 64-bit)")
    g.add_argument("--threads", type=_positive_int, default=1, help="worker threads for render/stereo")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="depthsim", description="Differentiable structured-light depth sensor simulator.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def scene_args(p):
        p.add_argument("--scene", type=Path, help="scene file")
        p.add_argument("--plane", type=_floats, help="plane 'z_mm[,alpha_deg]' when no scene file is given")
        p.add_argument("--pattern", type=Path, help="pattern image (PNG or PFM); default: random dots")

    p = sub.add_parser("render", parents=[common], help="scene -> capture, depth and ground truth")
    scene_args(p)
    p.add_argument("--postprocess", choices=POSTPROCESS_MODES, default="none")
    p.add_argument("--weights", type=Path, help="conv2 weight file")
    p.add_argument("--depth-noise-std", type=float, default=0.0, help="gaussian post-processing std (mm)")

    p = sub.add_parser("match", parents=[common], help="rectified pair -> disparity")
    p.add_argument("--left", type=Path, required=True)
    p.add_argument("--right", type=Path, required=True)
    p.add_argument("--min-disparity", type=int, default=0)
    p.add_argument("--max-disparity", type=int)
    p.add_argument("--block-size", type=int)
    p.add_argument("--temperature", type=float)

    p = sub.add_parser("noise-study", parents=[common], help="flat-plane error grid -> CSV")
    p.add_argument("--z", type=_floats, default=(1000.0, 2000.0, 3000.0, 4000.0), help="distances (mm)")
    p.add_argument("--alpha", type=_floats, default=(0.0,), help="tilts (deg)")
    p.add_argument("--samples", type=_positive_int, default=1)
    p.add_argument("--bins", type=_positive_int, default=16)

    p = sub.add_parser("calibrate", parents=[common], help="reference scans -> fitted parameters")
    p.add_argument("--scan", action="append", required=True, metavar="SCENE:DEPTH",
                   help="scene file and its depth map (PFM or 16-bit PNG, 0 = invalid); repeatable")
    p.add_argument("--fit", required=True, help="comma-separated parameter names")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pattern", type=Path)
    p.add_argument("--postprocess", choices=POSTPROCESS_MODES, default="none")
    p.add_argument("--weights", type=Path, help="initial conv2 weights (default zeros)")

    p = sub.add_parser("optimize-pose", parents=[common], help="rotate a tilted plane to face the sensor")
    p.add_argument("--z", type=float, default=1000.0)
    p.add_argument("--alpha", type=float, default=40.0)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--tol-deg", type=float)
    p.add_argument("--pattern", type=Path)

    p = sub.add_parser("optimize-pattern", parents=[common], help="optimize the emitted pattern")
    scene_args(p)
    p.add_argument("--albedo", type=_floats, default=(1.0, 0.0, 0.0), help="plane albedo r,g,b")
    p.add_argument("--channels", type=_positive_int, default=3)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--v-max", type=float, default=1.0)
    p.add_argument("--noise-samples", type=_positive_int, default=1, help="noise draws averaged per step")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--tilt", type=float, help="plane tilt (deg)")
    p.add_argument("--samples", type=_positive_int, default=32)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _config(args) -> SensorConfig:
    if args.config is not None:
        if not args.config.exists():
            raise InputError(f"configuration file {args.config} not found")
        return SensorConfig.from_text(args.config.read_text(), base=preset(args.preset))
    return preset(args.preset)


def _read_map(path: Path) -> np.ndarray:
    if not path.exists():
        raise InputError(f"{path} not found")
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".png":
        return read_image(path)
    raise InputError(f"{path}: expected a .pfm or .png file")


def _read_depth(path: Path) -> np.ndarray:
    if not path.exists():
        raise InputError(f"{path} not found")
    if path.suffix.lower() == ".png":
        return read_depth_png(path)
    return _read_map(path)


def _scene(args, albedo=(1.0, 1.0, 1.0)) -> Scene:
    if args.scene is not None:
        if not args.scene.exists():
            raise InputError(f"scene file {args.scene} not found")
        return Scene.load(args.scene)
    if args.plane:
        alpha = args.plane[1] if len(args.plane) > 1 else 0.0
        return Scene.plane_scene(args.plane[0], alpha, albedo)
    raise UsageError("give --scene or --plane")


def _pattern(args, cfg: SensorConfig, channels: int = 1) -> PatternImage:
    if getattr(args, "pattern", None) is not None:
        if not args.pattern.exists():
            raise InputError(f"pattern file {args.pattern} not found")
        values = _read_map(args.pattern)
        return PatternImage(values if values.ndim == 3 else values[:, :, None])
    return PatternImage.for_sensor(cfg, channels=channels, seed=args.seed)


def _strips(cfg: SensorConfig, threads: int) -> int:
    return max(1, min(threads, cfg.height // (2 * cfg.block_size)))


def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_render(args) -> int:
    cfg = _config(args)
    scene = _scene(args)
    pattern = _pattern(args, cfg)
    processor = ConvPostProcessor.load(args.weights) if args.weights is not None else None
    ps = ParameterSet.from_components(cfg, scene, pattern, processor)
    params = ps.bind()
    if args.postprocess == "gaussian":
        params["depth_noise_std"] = args.depth_noise_std
    r = simulate(scene, cfg, pattern, params, seed=args.seed, postprocess=args.postprocess,
                 processor=processor, strips=_strips(cfg, args.threads), threads=args.threads)
    depth = np.where(r.valid, np.asarray(r.depth), 0.0)
    if not np.all(np.isfinite(depth)):
        raise NumericalError("simulated depth contains non-finite values")
    out = _out(args)
    cap = r.capture.numpy()
    write_pfm(out / "capture.pfm", np.asarray(r.intensity))
    write_pfm(out / "depth.pfm", depth)
    write_depth_png(out / "depth16.png", depth, r.valid)
    write_pfm(out / "gt_depth.pfm", cap.gt_depth)
    write_pfm(out / "shadow.pfm", cap.shadow_map)
    cfg.save(out / "config.ini")
    print(json.dumps({"valid_fraction": float(r.valid.mean()), "d_range": list(r.d_range)}))
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _config(args)
    left, right = _read_map(args.left), _read_map(args.right)
    dm = match_pair(left, right, max_disparity=args.max_disparity, min_disparity=args.min_disparity,
                    block_size=args.block_size or cfg.block_size,
                    temperature=args.temperature or cfg.temperature,
                    confidence_threshold=cfg.confidence_threshold)
    out = _out(args)
    write_pfm(out / "disparity.pfm", np.where(dm.valid, np.asarray(dm.disparity), 0.0))
    write_pfm(out / "confidence.pfm", dm.confidence)
    print(json.dumps({"valid_fraction": float(dm.valid.mean())}))
    return EXIT_OK


def cmd_noise_study(args) -> int:
    cfg = _config(args)
    grid = NoiseStudyGrid(tuple(args.z), tuple(args.alpha), args.samples)
    res = noise_study(cfg, grid, _pattern(args, cfg), seed=args.seed, n_bins=args.bins,
                      threads=args.threads, strips=_strips(cfg, args.threads))
    res.to_csv(_out(args) / "noise_study.csv")
    write_reference_curves(_out(args) / "reference_models.csv", grid.distances, grid.tilts)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    fit = [n.strip() for n in args.fit.split(",") if n.strip()]
    unknown = [n for n in fit if n not in PARAMETER_NAMES]
    if unknown:
        raise UsageError(f"unknown parameters {unknown}")
    scans = []
    for item in args.scan:
        scene_path, sep, depth_path = item.rpartition(":")
        if not sep:
            raise UsageError(f"--scan expects SCENE:DEPTH, got {item!r}")
        if not Path(scene_path).exists():
            raise InputError(f"scene file {scene_path} not found")
        depth = _read_depth(Path(depth_path))
        if depth.shape != (cfg.height, cfg.width):
            raise InputError(f"{depth_path}: shape {depth.shape} does not match the sensor "
                             f"({cfg.height}, {cfg.width})")
        scans.append(ReferenceScan(Scene.load(scene_path), depth, depth > 0))
    pattern = _pattern(args, cfg)
    processor = ConvPostProcessor.load(args.weights) if args.weights is not None else None
    if args.postprocess == "conv2" and processor is None:
        processor = ConvPostProcessor()
    ps = ParameterSet.from_components(cfg, scans[0].scene, pattern, processor)
    out = _out(args)
    try:
        res = calibrate(cfg, pattern, scans, ps, fit, spec=LossSpec(), iterations=args.iterations, lr=args.lr,
                        seed=args.seed, postprocess=args.postprocess, processor=processor,
                        strips=_strips(cfg, args.threads), threads=args.threads)
    except NumericalError as exc:
        if getattr(exc, "trace", None) is not None:
            exc.trace.to_csv(out / "trace.csv")
        raise
    res.trace.to_csv(out / "trace.csv")
    fitted = cfg.replace(**{n: float(res.params[n]) for n in fit if n in _CONFIG_SCALARS})
    fitted.save(out / "fitted.ini")
    if any(n.startswith("conv_") for n in fit):
        ConvPostProcessor({k: res.params[k] for k in ConvPostProcessor.shapes}).save(out / "weights.dscv")
    print(json.dumps({"best_iteration": res.best_iteration, "loss": float(res.trace.losses[res.best_iteration]),
                      **{n: float(res.params[n]) for n in fit if res.params[n].size == 1}}))
    return EXIT_OK


def cmd_optimize_pose(args) -> int:
    cfg = _config(args)
    scene = Scene.plane_scene(args.z, args.alpha)
    res = optimize_scene_pose(scene, cfg, _pattern(args, cfg), iterations=args.iterations, lr=args.lr,
                              seed=args.seed, tol_deg=args.tol_deg)
    write_csv(_out(args) / "pose_trace.csv", ["iteration", "loss", "tilt_deg"],
              [[i, float(l), float(a)] for i, (l, a) in enumerate(zip(res.losses, res.tilt_deg))])
    print(json.dumps({"final_tilt_deg": float(res.tilt_deg[-1])}))
    return EXIT_OK


def cmd_optimize_pattern(args) -> int:
    cfg = _config(args)
    if len(args.albedo) != 3:
        raise UsageError("--albedo needs three values")
    scene = _scene(args, args.albedo) if (args.scene or args.plane) else Scene.plane_scene(1000.0, 0.0, args.albedo)
    pattern = _pattern(args, cfg, channels=args.channels)
    res = optimize_pattern(scene, cfg, pattern, iterations=args.iterations, lr=args.lr, v_max=args.v_max,
                           seed=args.seed, noise_samples=args.noise_samples)
    out = _out(args)
    values = res.pattern.values
    write_pfm(out / "pattern.pfm", values if values.shape[2] in (1, 3) else values.sum(axis=2))
    fr = res.fractions
    write_csv(out / "energy.csv", ["iteration", "loss"] + [f"share_{c}" for c in range(fr.shape[1])],
              [[i, float(l)] + [float(v) for v in row] for i, (l, row) in enumerate(zip(res.losses, fr))])
    fp0, fp1 = res.footprint_fractions() if res.footprint.any() else (fr[0], fr[-1])
    print(json.dumps({"initial_share": fr[0].tolist(), "final_share": fr[-1].tolist(),
                      "initial_footprint_share": fp0.tolist(), "final_footprint_share": fp1.tolist()}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    base = _config(args)
    rep = run_gradcheck(base, args.size, tilt_deg=args.tilt, seed=args.seed, n_samples=args.samples)
    rows = [[n, rep.checked[n], e, e < args.tol] for n, e in rep.errors.items()]
    write_csv(_out(args) / "gradcheck.csv", ["parameter", "checked", "max_rel_error", "passed"], rows)
    for n, c, e, ok in rows:
        print(f"{n:20s} n={c:3d} max_rel_err={e:.3e} {'ok' if ok else 'FAIL'}")
    if not rep.passed(args.tol):
        raise NumericalError(f"gradient check failed: max error {max(rep.errors.values()):.3e} >= {args.tol}")
    return EXIT_OK


COMMANDS = {"render": cmd_render, "match": cmd_match, "noise-study": cmd_noise_study,
            "calibrate": cmd_calibrate, "optimize-pose": cmd_optimize_pose,
            "optimize-pattern": cmd_optimize_pattern, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(_error_line("usage", str(exc)), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractError, InputError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(_error_line("NumericalError", str(exc)), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
