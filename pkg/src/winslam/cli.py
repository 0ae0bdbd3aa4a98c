"""Command-line entry point: ``winslam run | synth | eval``.

Exit codes: 0 success, 2 completed with map breaks, 1 fatal pipeline error,
64 usage error, 65 malformed input data (and, for eval, any unreadable
file), 66 missing or unreadable input.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .errors import ConfigError, DegenerateSet, NoAssociations, SlamError, TrackTableError
from .evaluation import EvalReport, align_trajectory, associate, depth_rmse, evaluate_map
from .pipeline import PipelineConfig, run_pipeline
from .synthetic import MotionProfile, ProfileKind, generate_sequence, make_scene
from .tracking import load_image_dir, read_tracks, track_frames, write_tracks

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_BREAKS = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NOINPUT = 66

log = logging.getLogger("winslam")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--config", help="'key = value' config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = _Parser(prog="winslam", description="Windowed monocular SLAM back-end")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    run = sub.add_parser("run", help="estimate trajectory and structure")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--tracks", help="tracks file (track_id frame x y)")
    src.add_argument("--images", help="directory of PGM/PNG frames")
    run.add_argument("--intrinsics", help="intrinsics file (focal, cx, cy, r)")
    run.add_argument("--times", help="timestamps, one per frame (tracks input)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    run.add_argument("--gt-trajectory", help="TUM ground truth for the report")
    run.add_argument("--gt-points", help="ground-truth points (track_id X Y Z) for the report")
    _common(run)

    syn = sub.add_parser("synth", help="generate a synthetic track sequence")
    syn.add_argument("--profile", required=True, help="frontal | left-right | egomotion")
    syn.add_argument("--length", type=float, required=True, help="path length in metres")
    syn.add_argument("--noise", type=float, default=0.5, help="pixel noise sigma")
    syn.add_argument("--frames", type=int, default=None, help="frame count (default: length at 1 m/s, 30 fps)")
    syn.add_argument("--gap", default=None, metavar="START:LENGTH", help="frames with no observations")
    _common(syn)

    ev = sub.add_parser("eval", help="compare an estimate with ground truth")
    ev.add_argument("--est", required=True, help="estimated TUM trajectory")
    ev.add_argument("--gt", required=True, help="ground-truth TUM trajectory")
    ev.add_argument("--est-points", help="estimated points (track_id X Y Z)")
    ev.add_argument("--gt-points", help="ground-truth points (track_id X Y Z)")
    ev.add_argument("--max-dt", type=float, default=1e-6, help="timestamp association tolerance (s)")
    ev.add_argument("--out", default=None, help="optional directory for eval_report.txt")
    ev.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _config(args):
    values = {}
    if args.config:
        values.update(io.read_key_values(args.config))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return PipelineConfig.from_mapping(values)


def _read_times(path):
    t = np.loadtxt(path, ndmin=1)
    return {i: float(v) for i, v in enumerate(t)}


def cmd_run(args):
    if not args.intrinsics:
        raise UsageError("run: --intrinsics is required")
    if not (args.tracks or args.images):
        raise UsageError("run: one of --tracks or --images is required")
    cfg = _config(args)
    intr, size = io.read_intrinsics(args.intrinsics)
    if args.tracks:
        table = read_tracks(args.tracks, *(size or (None, None)))
        table.validate()
        times = _read_times(args.times) if args.times else {f: f / cfg.fps for f in table.frame_indices}
    else:
        frames = list(load_image_dir(args.images, cfg.fps))
        times = {fr.index: fr.timestamp for fr in frames}
        table = track_frames(frames, cfg.tracker())
    result = run_pipeline(table, intr, times, cfg)
    if not result.gmap.cameras:
        raise SlamError("no window could be reconstructed")
    os.makedirs(args.out, exist_ok=True)
    traj = result.gmap.trajectory()
    io.write_tum(
        os.path.join(args.out, "trajectory.txt"), [r[1] for r in traj], [r[2] for r in traj], [r[3] for r in traj]
    )
    pts = result.gmap.points
    io.write_ply(os.path.join(args.out, "points.ply"), np.array([pts[t] for t in sorted(pts)]).reshape(-1, 3))
    io.write_points(os.path.join(args.out, "points.txt"), pts)

    report = EvalReport(breaks=result.breaks, timings=result.timings)
    report.window_rmse = [w.rmse for w in result.windows]
    report.extra = {
        "keyframes": len(result.keyframes),
        "windows": len(result.windows),
        "failed_windows": sum(bool(w.failure) for w in result.windows),
        "global_refinements": len(result.refinements),
        "points": len(pts),
        "focal": f"{result.gmap.intrinsics.focal:.9g}" if result.gmap.intrinsics else "nan",
        "distortion_r": f"{result.gmap.intrinsics.r:.9g}" if result.gmap.intrinsics else "nan",
        "cost_increases": result.monotonic_violations(),
    }
    if args.gt_trajectory:
        gt_t, gt_R, gt_C = io.read_tum(args.gt_trajectory)
        gt_pts = io.read_points(args.gt_points) if args.gt_points else None
        report.ate_rmse, report.depth_rmse = evaluate_map(result.gmap, gt_t, gt_C, gt_pts, gt_R)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        for line in cfg.lines():
            fh.write(line + "\n")
        for line in report.lines():
            fh.write(line + "\n")
    print(report.summary())
    return EXIT_BREAKS if result.breaks else EXIT_OK


def _parse_gap(text):
    if text is None:
        return None
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError as err:
        raise UsageError(f"--gap expects START:LENGTH, got {text!r}") from err
    if a < 0 or b < 1:
        raise UsageError("--gap needs START >= 0 and LENGTH >= 1")
    return a, b


def cmd_synth(args):
    try:
        kind = ProfileKind(args.profile)
    except ValueError as err:
        choices = ", ".join(k.value for k in ProfileKind)
        raise UsageError(f"synth: unknown profile {args.profile!r} (choose {choices})") from err
    if args.length <= 0 or args.noise < 0 or (args.frames is not None and args.frames < 2):
        raise UsageError("synth: need length > 0, noise >= 0 and frames >= 2")
    seed = 0 if args.seed is None else args.seed
    gap = _parse_gap(args.gap)
    profile = MotionProfile(kind, args.length, seed=seed)
    scene = make_scene(profile, seed=seed)
    seq = generate_sequence(scene, profile, args.frames, noise_px=args.noise, seed=seed, gap=gap)
    os.makedirs(args.out, exist_ok=True)
    write_tracks(os.path.join(args.out, "tracks.txt"), seq.table)
    io.write_intrinsics(os.path.join(args.out, "intrinsics.txt"), seq.intrinsics, (scene.width, scene.height))
    io.write_tum(os.path.join(args.out, "gt_trajectory.txt"), seq.timestamps, seq.rotations, seq.centers)
    io.write_points(os.path.join(args.out, "gt_points.txt"), seq.points)
    with open(os.path.join(args.out, "times.txt"), "w") as fh:
        fh.writelines(f"{t:.17g}\n" for t in seq.timestamps)
    print(f"wrote {len(seq.timestamps)} frames, {len(seq.points)} tracks to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    try:
        est_t, est_R, est_C = io.read_tum(args.est)
        gt_t, gt_R, gt_C = io.read_tum(args.gt)
        est_pts = io.read_points(args.est_points) if args.est_points else None
        gt_pts = io.read_points(args.gt_points) if args.gt_points else None
    except (io.FormatError, OSError) as err:
        # eval reports unreadable and malformed files alike as data errors
        print(f"eval: {err}", file=sys.stderr)
        return EXIT_DATA
    ie, ig = associate(est_t, gt_t, args.max_dt)
    if len(ie) < 3:
        print(f"eval: association error: only {len(ie)} timestamps match (need 3)", file=sys.stderr)
        return EXIT_DATA
    try:
        sim = align_trajectory(est_C[ie], gt_C[ig], est_R[ie], gt_R[ig])
    except DegenerateSet as err:
        print(f"eval: {err}", file=sys.stderr)
        return EXIT_DATA
    d = sim[0] * est_C[ie] @ sim[1].T + sim[2] - gt_C[ig]
    ate = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    line = f"ATE_RMSE_M={ate:.6f}"
    if est_pts is not None and gt_pts is not None:
        try:
            line += f" DEPTH_RMSE_CM={100 * depth_rmse(est_pts, gt_pts, sim):.6f}"
        except NoAssociations as err:
            print(f"eval: {err}", file=sys.stderr)
            return EXIT_DATA
    print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.txt"), "w") as fh:
            fh.write(f"associated = {len(ie)}\nscale = {sim[0]:.9g}\n{line}\n")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
        )
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as err:
        print(f"cannot read input: {err}", file=sys.stderr)
        return EXIT_NOINPUT
    except (io.FormatError, TrackTableError, ValueError) as err:
        print(f"bad input: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_NOINPUT
    except SlamError as err:
        print(f"fatal: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
