"""Command-line entry point: simulate, localize, fuse, eval, presets.

Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 non-convergence,
4 threshold failure. A simulate run writes everything under --out and finishes
with an atomically written manifest sufficient to reproduce it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import evaluation as ev
from . import sim
from .fusion import FusionConfig, FusionMode
from .geometry import CameraIntrinsics, CameraPose
from .map_matching import (
    MatchingNonConvergence,
    MatchingOptions,
    UnderConstrainedError,
    estimate_pose,
    load_recognized,
)
from .map_model import MapFormatError, MapValidationError, load_map

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3
EXIT_THRESHOLD = 4


def _common(parser):
    parser.add_argument("--seed", type=int, default=None, help="random seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--verbose", action="store_true")
    return parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopmap",
                                description="cooperative perception simulation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    ps = _common(sub.add_parser("simulate", help="run Monte-Carlo trials on a preset"))
    ps.add_argument("--preset", required=True, choices=sim.PRESET_NAMES)
    ps.add_argument("--mode", default="distributed", choices=[m.value for m in FusionMode])
    ps.add_argument("--trials", type=int, default=1)
    ps.add_argument("--noise-scale", type=float, default=1.0)
    ps.set_defaults(func=cmd_simulate)

    pl = _common(sub.add_parser("localize", help="single-frame map-matching solve"))
    pl.add_argument("--map", required=True, dest="map_path")
    pl.add_argument("--features", required=True)
    pl.add_argument("--initial", required=True,
                    help="initial camera pose: x,y,z,yaw,pitch,roll (meters, degrees)")
    pl.add_argument("--camera", default="400,400,320,240", help="fx,fy,cx,cy")
    pl.add_argument("--lambda-n", type=float, default=0.001)
    pl.add_argument("--camera-height", type=float, default=1.5)
    pl.add_argument("--gate", type=float, default=None)
    pl.add_argument("--max-iterations", type=int, default=50)
    pl.set_defaults(func=cmd_localize)

    pf = _common(sub.add_parser("fuse", help="single-tick fusion debug"))
    pf.add_argument("--preset", required=True, choices=sim.PRESET_NAMES)
    pf.add_argument("--mode", default="distributed", choices=[m.value for m in FusionMode])
    pf.add_argument("--tick", type=int, default=0)
    pf.add_argument("--noise-scale", type=float, default=1.0)
    pf.set_defaults(func=cmd_fuse)

    pe = _common(sub.add_parser("eval", help="compare estimate sources in a results dir"))
    pe.add_argument("--results", required=True)
    pe.add_argument("--thresholds", default=None)
    pe.set_defaults(func=cmd_eval)

    pp = _common(sub.add_parser("presets", help="list scenario presets"))
    pp.set_defaults(func=cmd_presets)
    return p


def _load_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _apply_overrides(obj, overrides: dict, label: str):
    for key, val in overrides.items():
        if not hasattr(obj, key):
            raise SystemExit(f"coopmap: unknown {label} option {key!r} in config")
        setattr(obj, key, val)


def _build_setup(args):
    """(scenario, suite, fusion config) from preset + config file + flags."""
    cfg_doc = _load_config(args.config)
    scenario = sim.build_preset(args.preset)
    suite = sim.default_suite()
    _apply_overrides(suite, cfg_doc.get("suite", {}), "suite")
    scale = getattr(args, "noise_scale", 1.0)
    if scale != 1.0:
        suite = suite.scaled(scale)
    matching = MatchingOptions(camera_height=suite.camera.height)
    _apply_overrides(matching, cfg_doc.get("matching", {}), "matching")
    fusion = FusionConfig(mode=FusionMode(args.mode), matching=matching)
    _apply_overrides(fusion, cfg_doc.get("fusion", {}), "fusion")
    return scenario, suite, fusion


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, doc: dict) -> None:
    artifacts = {}
    for name in sorted(os.listdir(out_dir)):
        full = os.path.join(out_dir, name)
        if name == "manifest.json" or not os.path.isfile(full):
            continue
        artifacts[name] = None if name.endswith(".svg") else _sha256(full)
    doc["artifacts"] = artifacts
    tmp = os.path.join(out_dir, ".manifest.tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def cmd_simulate(args) -> int:
    if args.seed is None:
        print("coopmap simulate: --seed is required (no silent entropy)", file=sys.stderr)
        return EXIT_USAGE
    if args.trials < 1:
        print("coopmap simulate: --trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out_dir = args.out or f"coopmap-{args.preset}-{args.mode}"
    os.makedirs(out_dir, exist_ok=True)
    scenario, suite, fusion = _build_setup(args)

    results = sim.run_monte_carlo(scenario, suite, fusion, args.trials, args.seed)
    rows = list(sim.trial_rows(results))

    trials_csv = os.path.join(out_dir, "trials.csv")
    sim.write_trials_csv(results, trials_csv)

    reports = {"fused": ev.build_report(rows, "fused", "fused", scenario.name, args.mode),
               "gnss": ev.build_report(rows, "gnss", "gnss", scenario.name, args.mode)}
    singles = ev.single_vehicle_reports(rows, scenario.name, args.mode)
    reports.update(singles)
    ev.write_metrics_csv(list(reports.values()), os.path.join(out_dir, "metrics.csv"))

    summary = {label: rep.summary() for label, rep in reports.items()}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")

    with_targets = {v: r for v, r in singles.items() if not math.isnan(r.agg_targets)}
    if with_targets and not math.isnan(reports["fused"].agg_targets):
        best = min(with_targets.values(), key=lambda r: r.agg_targets)
        comparison = ev.compare_modes({"fused": reports["fused"], best.label: best},
                                      baseline=best.label, proposed="fused")
        ev.write_comparison_csv(comparison, os.path.join(out_dir, "comparison.csv"))
        if args.verbose:
            print("\n".join(comparison.summary_lines()))

    try:
        ev.plot_rmse_svg(list(reports.values()), os.path.join(out_dir, "rmse_self.svg"), "self")
        tgt_reports = [r for r in reports.values() if not math.isnan(r.agg_targets)]
        if tgt_reports:
            ev.plot_rmse_svg(tgt_reports, os.path.join(out_dir, "rmse_targets.svg"), "targets")
    except Exception as exc:  # plots are auxiliary, never fail the run
        if args.verbose:
            print(f"plotting skipped: {exc}", file=sys.stderr)

    _write_manifest(out_dir, {
        "command": "simulate",
        "argv": sys.argv[1:],
        "preset": args.preset,
        "mode": args.mode,
        "trials": args.trials,
        "seed": args.seed,
        "noise_scale": args.noise_scale,
        "config": args.config,
        "out": out_dir,
    })

    failed = sum(r.failed_ticks for r in results)
    n_ticks = sum(len(r.ticks) for r in results)
    print(f"{scenario.name} [{args.mode}] trials={args.trials} seed={args.seed}: "
          f"fused self RMSE {reports['fused'].agg_self:.4f} m, "
          f"target RMSE {reports['fused'].agg_targets:.4f} m, "
          f"gnss self RMSE {reports['gnss'].agg_self:.4f} m "
          f"({failed}/{n_ticks} failed ticks) -> {out_dir}")
    if failed:
        per_trial = {r.trial_index: r.failed_ticks for r in results if r.failed_ticks}
        print(f"failed ticks per trial: {per_trial}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_localize(args) -> int:
    try:
        hd_map = load_map(args.map_path)
        recognized = load_recognized(args.features)
    except (OSError, MapFormatError, MapValidationError, ValueError, KeyError) as exc:
        print(f"coopmap localize: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        vals = [float(v) for v in args.initial.split(",")]
        if len(vals) != 6:
            raise ValueError("expected 6 components")
        initial = CameraPose(vals[:3], np.deg2rad(vals[3:]))
        fx, fy, cx, cy = (float(v) for v in args.camera.split(","))
    except ValueError as exc:
        print(f"coopmap localize: bad --initial/--camera: {exc}", file=sys.stderr)
        return EXIT_USAGE
    intrinsics = CameraIntrinsics(fx, fy, cx, cy, *recognized.image_size)
    opts = MatchingOptions(lambda_n=args.lambda_n, camera_height=args.camera_height,
                           max_iterations=args.max_iterations)
    if args.gate is not None:
        opts.gate_px = args.gate

    def report_doc(rep):
        return {
            "iterations": rep.iterations,
            "initial_cost": rep.initial_cost,
            "final_cost": rep.final_cost,
            "reason": rep.reason.value,
            "line_matches": rep.n_line_matches,
            "point_matches": rep.n_point_matches,
            "region_points": rep.n_region_points,
            "dropped_features": rep.dropped_features,
            "under_constrained": rep.under_constrained,
        }

    try:
        pose, rep = estimate_pose(hd_map, recognized, initial, intrinsics, opts)
    except UnderConstrainedError as exc:
        print(json.dumps({"converged": False, "error": str(exc)}, indent=1))
        return EXIT_NONCONVERGENCE
    except MatchingNonConvergence as exc:
        doc = {"converged": False, "error": str(exc)}
        if exc.report is not None:
            doc["report"] = report_doc(exc.report)
        print(json.dumps(doc, indent=1))
        return EXIT_NONCONVERGENCE
    print(json.dumps({
        "converged": True,
        "pose": {
            "x": pose.center[0], "y": pose.center[1], "z": pose.center[2],
            "yaw_deg": math.degrees(pose.yaw),
            "pitch_deg": math.degrees(pose.pitch),
            "roll_deg": math.degrees(pose.roll),
        },
        "report": report_doc(rep),
    }, indent=1))
    return EXIT_OK


def cmd_fuse(args) -> int:
    if args.seed is None:
        print("coopmap fuse: --seed is required", file=sys.stderr)
        return EXIT_USAGE
    scenario, suite, fusion = _build_setup(args)
    times = scenario.times()
    if not 0 <= args.tick < len(times):
        print(f"coopmap fuse: tick must be in [0, {len(times) - 1}]", file=sys.stderr)
        return EXIT_USAGE
    res = sim.run_trial(scenario, suite, fusion, args.seed)
    tk = res.ticks[args.tick]
    if tk.failed:
        print(f"coopmap fuse: tick failed: {tk.error}", file=sys.stderr)
        return EXIT_RUNTIME
    doc = {
        "t": tk.t,
        "mode": args.mode,
        "bandwidth_bytes": tk.bandwidth_bytes,
        "vehicles": {vid: [float(v) for v in pose]
                     for vid, pose in sorted(tk.fused.vehicles.items())},
        "obstacles": {oid: [float(v) for v in pos]
                      for oid, pos in sorted(tk.fused.obstacles.items())},
        "truth": {aid: [float(v) for v in np.atleast_1d(p)]
                  for aid, p in sorted(tk.truth.items())},
    }
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    trials_csv = os.path.join(args.results, "trials.csv")
    if not os.path.isfile(trials_csv):
        print(f"coopmap eval: no trials.csv under {args.results}", file=sys.stderr)
        return EXIT_RUNTIME
    rows = ev.load_rows(trials_csv)
    thresholds = None
    if args.thresholds:
        try:
            with open(args.thresholds) as fh:
                thresholds = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"coopmap eval: bad thresholds file: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    fused = ev.build_report(rows, "fused", "fused")
    singles = ev.single_vehicle_reports(rows)
    with_targets = {v: r for v, r in singles.items() if not math.isnan(r.agg_targets)}
    if not with_targets or math.isnan(fused.agg_targets):
        print("coopmap eval: no target observations to compare", file=sys.stderr)
        return EXIT_RUNTIME
    best = min(with_targets.values(), key=lambda r: r.agg_targets)
    reports = {"fused": fused, best.label: best}
    reports.update({v: r for v, r in singles.items() if r.label != best.label})
    comparison = ev.compare_modes({"fused": fused, best.label: best},
                                  baseline=best.label, proposed="fused",
                                  thresholds=thresholds)
    out_dir = args.out or args.results
    os.makedirs(out_dir, exist_ok=True)
    ev.write_comparison_csv(comparison, os.path.join(out_dir, "comparison.csv"))
    print("\n".join(comparison.summary_lines()))
    return EXIT_OK if comparison.passed else EXIT_THRESHOLD


def cmd_presets(args) -> int:
    descriptions = {
        "urban": "4 connected vehicles, 22 static features, 14 moving obstacles",
        "suburban": "urban geometry at half map-feature density (11 features)",
        "overlap": "target inside both connected vehicles' perception",
        "blindspot1": "ego's view of the target blocked by the connected vehicle",
        "blindspot2": "connected vehicle and target both outside ego's field of view",
    }
    for name in sim.PRESET_NAMES:
        print(f"{name:12} {descriptions[name]}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"coopmap: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
