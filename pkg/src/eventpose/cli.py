"""Command-line pipeline: simulate | track | evaluate | all.

Exit codes: 0 success, 1 tracking lost (partial outputs are still written),
2 I/O or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .events import read_events, write_events
from .geometry import read_trajectory, write_trajectory
from .metrics import evaluate_trajectories
from .pipeline import EventPoseTracker, write_track_log
from .simulate import render_events
from .solver import TrackingLostError

EXIT_OK = 0
EXIT_TRACKING_LOST = 1
EXIT_IO_ERROR = 2


def _write_manifest(outdir: Path, command: str, config: RunConfig | None, outputs: dict) -> None:
    import numpy
    import scipy

    manifest = {
        "command": command,
        "config_sha256": config.sha256() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "versions": {
            "eventpose": __version__,
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "outputs": outputs,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(args, config: RunConfig | None) -> Path:
    out = args.output or (config.output if config is not None else "run_output")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _overrides(args) -> dict:
    ov = {}
    if getattr(args, "seed", None) is not None:
        ov["run.seed"] = args.seed
    if getattr(args, "delta", None) is not None:
        ov["run.delta"] = args.delta
    if getattr(args, "detector", None) is not None:
        ov["tracker.detector"] = args.detector
    if getattr(args, "output", None) is not None:
        ov["run.output"] = args.output
    return ov


def cmd_simulate(args) -> int:
    config = load_config(args.config, _overrides(args))
    outdir = _outdir(args, config)
    result = render_events(
        model=config.model,
        trajectory=config.trajectory,
        cam=config.camera,
        contrast=config.simulation.contrast,
        rate_hz=config.simulation.rate_hz,
        edge_sigma=config.simulation.edge_sigma_px,
        noise_rate_hz=config.simulation.noise_rate_hz,
        seed=config.seed,
    )
    events_path = outdir / "events.evt"
    truth_path = outdir / "truth.csv"
    write_events(events_path, result.events, config.camera.width, config.camera.height)

    t = result.truth.timestamps_us
    stride = max(int(round(config.simulation.rate_hz / config.simulation.truth_rate_hz)), 1)
    keep = list(range(0, t.size, stride))
    if keep[-1] != t.size - 1:
        keep.append(t.size - 1)
    write_trajectory(truth_path, result.truth.resample(t[keep]))

    _write_manifest(outdir, "simulate", config, {
        "events": events_path.name, "truth": truth_path.name, **result.stats,
    })
    print(f"simulate: {result.stats['events']} events over "
          f"{result.stats['micro_steps']} micro-steps -> {outdir}")
    return EXIT_OK


def cmd_track(args) -> int:
    config = load_config(args.config, _overrides(args))
    outdir = _outdir(args, config)
    events_path = Path(args.events or outdir / "events.evt")
    truth_path = Path(args.truth or outdir / "truth.csv")

    events, _size = read_events(events_path)
    truth = read_trajectory(truth_path) if truth_path.exists() else None

    tracker = EventPoseTracker(
        config.model, config.camera,
        max_rot_step_deg=config.max_rot_step_deg,
        max_trans_step_m=config.max_trans_step_m,
        use_ransac=config.use_ransac,
        ransac_threshold=config.ransac_threshold,
        **config.tracker,
    )
    estimate_path = outdir / "estimate.csv"
    log_path = outdir / "track_log.csv"
    try:
        tracker.fit(events, truth)
        estimate = tracker.predict(events)
    except TrackingLostError as exc:
        if exc.partial:
            write_trajectory(estimate_path, exc.partial["trajectory"])
            write_track_log(log_path, exc.partial["track_log"])
        print(f"track: {exc}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    write_trajectory(estimate_path, estimate)
    write_track_log(log_path, tracker.track_log_)
    flagged = sum(1 for d in tracker.diagnostics_ if d.flagged)
    _write_manifest(outdir, "track", config, {
        "estimate": estimate_path.name,
        "track_log": log_path.name,
        "windows": len(estimate) - 1,
        "flagged_windows": flagged,
    })
    print(f"track: {len(estimate) - 1} windows, {flagged} flagged -> {outdir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_config(args.config, _overrides(args)) if args.config else None
    outdir = _outdir(args, config)
    truth_path = Path(args.truth or outdir / "truth.csv")
    estimate_path = Path(args.estimate or outdir / "estimate.csv")
    delta = args.delta if args.delta is not None else (config.delta if config else 1)

    truth = read_trajectory(truth_path)
    estimate = read_trajectory(estimate_path)
    report = evaluate_trajectories(truth, estimate, delta)
    steps = report.pop("steps")

    metrics_path = outdir / "metrics.json"
    with open(metrics_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    steps_path = outdir / "rpe_steps.csv"
    with open(steps_path, "w") as fh:
        fh.write("t_us,rot_deg,trans_m,dt_s\n")
        for row in steps:
            fh.write(f"{row['t_us']},{row['rot_deg']:.17g},"
                     f"{row['trans_m']:.17g},{row['dt_s']:.17g}\n")
    if config is not None:
        _write_manifest(outdir, "evaluate", config, {
            "metrics": metrics_path.name, "steps": steps_path.name,
        })
    print(f"evaluate: R_rel = {report['r_rel_deg_per_s']:.4f} deg/s, "
          f"T_rel = {report['t_rel_cm_per_s']:.4f} cm/s over m = {report['m']} pairs")
    return EXIT_OK


def cmd_all(args) -> int:
    code = cmd_simulate(args)
    if code != EXIT_OK:
        return code
    args.events = None
    args.truth = None
    code = cmd_track(args)
    if code != EXIT_OK:
        return code
    args.estimate = None
    return cmd_evaluate(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eventpose",
        description="Event-camera 6-DoF pose tracking: simulate, track, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="config file (INI sections)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--output", default=None, help="override the output directory")

    p_sim = sub.add_parser("simulate", help="render a synthetic event stream + ground truth")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_track = sub.add_parser("track", help="track the pose through an event file")
    common(p_track)
    p_track.add_argument("--events", default=None, help="event file (default: OUTPUT/events.evt)")
    p_track.add_argument("--truth", default=None,
                         help="ground-truth CSV for initialization (default: OUTPUT/truth.csv)")
    p_track.add_argument("--detector", choices=["oracle", "density"], default=None)
    p_track.set_defaults(func=cmd_track)

    p_eval = sub.add_parser("evaluate", help="relative pose error between two trajectories")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--output", default=None)
    p_eval.add_argument("--truth", default=None)
    p_eval.add_argument("--estimate", default=None)
    p_eval.add_argument("--delta", type=int, default=None, help="pose step count for E_i")
    p_eval.set_defaults(func=cmd_evaluate)

    p_all = sub.add_parser("all", help="simulate, track, and evaluate in one run")
    common(p_all)
    p_all.add_argument("--detector", choices=["oracle", "density"], default=None)
    p_all.add_argument("--delta", type=int, default=None)
    p_all.set_defaults(func=cmd_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrackingLostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
