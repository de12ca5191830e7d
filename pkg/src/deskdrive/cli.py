"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import templates
from .action import ActionConfig, ExplorationConfig, Trajectory
from .errors import DeskDriveError, ParseError, ValidationError
from .harness import TrainJob, evaluate, load_job, train
from .metrics import plot_metrics
from .raster import RasterConfig, render_observation, save_channels_png
from .scene import FuzzConfig, load_scene, routine_fuzz, save_scene, validate_scene
from .simkernel import DynamicsLimits, EgoState, EpisodeConfig, save_log
from .trajgen import smooth

USAGE_ERROR, VALIDATION_ERROR, RUNTIME_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    p = _Parser(prog="deskdrive", description="Desk-scale driving RL platform")
    sub = p.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="generate, fuzz or validate scenes")
    scsub = sc.add_subparsers(dest="scene_command", required=True)

    gen = scsub.add_parser("gen", help="generate a synthetic scene")
    gen.add_argument("--template", required=True, choices=sorted(templates.TEMPLATES))
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--objects", type=int, default=0)

    fz = scsub.add_parser("fuzz", help="synthesize a perturbed copy of a scene")
    fz.add_argument("--scene", required=True)
    fz.add_argument("--out", required=True)
    fz.add_argument("--seed", type=int, default=0)
    fz.add_argument("--pos-jitter", type=float, default=1.0)
    fz.add_argument("--heading-jitter", type=float, default=0.0)
    fz.add_argument("--speed-jitter", type=float, default=0.0)
    fz.add_argument("--affect", default="both", choices=["ego_only", "objects_only", "both"])

    val = scsub.add_parser("validate", help="check a scene file")
    val.add_argument("path")

    sim = sub.add_parser("sim", help="simulation")
    simsub = sim.add_subparsers(dest="sim_command", required=True)
    run = simsub.add_parser("run", help="run one episode")
    run.add_argument("--scene", required=True)
    run.add_argument("--policy", default="straight",
                     help="straight | route | weights:PATH")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--explore", action="store_true")
    run.add_argument("--out", default=None, help="episode log path (JSONL)")

    rend = sub.add_parser("render", help="write the observation channels as PNG")
    rend.add_argument("--scene", required=True)
    rend.add_argument("--t", type=float, default=0.0)
    rend.add_argument("--out", required=True)

    tg = sub.add_parser("trajgen", help="standalone trajectory smoother")
    tg.add_argument("--anchors", required=True, help="JSON file with anchors")
    tg.add_argument("--out", required=True)
    tg.add_argument("--dense-dt", type=float, default=0.05)

    tr = sub.add_parser("train", help="run a training job")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", default=None)

    ev = sub.add_parser("eval", help="evaluate weights on a scene set")
    ev.add_argument("--scenes", required=True, help="directory of scene files")
    ev.add_argument("--weights", required=True)
    ev.add_argument("--episodes", type=int, default=1)
    ev.add_argument("--out", default=None)

    pl = sub.add_parser("plot", help="plot metrics curves")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    return p


def _cmd_scene(args) -> int:
    if args.scene_command == "gen":
        kwargs = {"seed": args.seed}
        if args.template != "blocked":
            kwargs["n_objects"] = args.objects
        scene = templates.make_scene(args.template, **kwargs)
        save_scene(scene, args.out)
        print(f"wrote {args.out} ({scene.ads_id})")
    elif args.scene_command == "fuzz":
        scene = load_scene(args.scene)
        fuzzed = routine_fuzz(
            scene,
            FuzzConfig(args.pos_jitter, args.heading_jitter, args.speed_jitter,
                       args.affect, args.seed),
        )
        save_scene(fuzzed, args.out)
        print(f"wrote {args.out} ({fuzzed.ads_id})")
    else:
        scene = load_scene(args.path)
        validate_scene(scene)
        print(f"{args.path}: valid ({scene.ads_id}, {len(scene.tracks)} objects)")
    return 0


def _cmd_sim_run(args) -> int:
    from .harness import _make_policy
    from .nets import spec_for_raster
    from .simkernel import run_episode

    scene = load_scene(args.scene)
    cfg = EpisodeConfig()
    weights = None
    policy_name = args.policy
    if args.policy.startswith("weights:"):
        with open(args.policy.split(":", 1)[1], "rb") as fh:
            weights = fh.read()
        policy_name = "neural"
    policy = _make_policy(policy_name, scene, cfg, weights,
                          spec_for_raster(cfg.raster, cfg.action), True)
    explore = ExplorationConfig(seed=args.seed) if args.explore else None
    log = run_episode(scene, policy, cfg, explore=explore, seed=args.seed)
    print(f"status={log.status} return={log.return_g0:.3f} steps={len(log.steps)}")
    if args.out:
        save_log(log, args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    cfg = RasterConfig()
    obs = render_observation(scene, scene.ego_start, args.t, scene.ego_speed,
                             [scene.ego_start], cfg)
    paths = save_channels_png(obs, args.out)
    print("\n".join(paths))
    return 0


def _cmd_trajgen(args) -> int:
    with open(args.anchors, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    pts = np.asarray(spec["points"], dtype=float)
    dt = float(spec.get("dt", 0.2))
    anchors = Trajectory(pts, dt)
    from .geometry import Pose

    state_d = spec.get("state", {})
    state = EgoState(
        pose=Pose(0.0, 0.0, 0.0),  # planning happens in the ego frame
        speed=float(state_d.get("speed", 0.0)),
        accel=float(state_d.get("accel", 0.0)),
        kappa=float(state_d.get("kappa", 0.0)),
    )
    limits = DynamicsLimits(**spec.get("limits", {}))
    cfg = ActionConfig(delta_t=dt, n_points=len(pts))
    result = smooth(anchors, state, limits, cfg, dense_dt=args.dense_dt,
                    end_mode=spec.get("end_mode", "free"))
    out = {
        "dense_dt": args.dense_dt,
        "points": result.trajectory.points.tolist(),
        "diagnostics": {
            "objective": result.objective,
            "kkt_residual": result.kkt_residual,
            "status": result.status,
            "fallback": result.fallback,
        },
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    print(f"wrote {args.out} (status={result.status}, fallback={result.fallback})")
    return 0


def _cmd_train(args) -> int:
    job = load_job(args.config)
    result = train(job, resume_from=args.resume,
                   progress=lambda row: print(json.dumps({
                       k: row[k] for k in ("iteration",) if k in row
                   } | ({"eval_return": row["eval"]["mean_return"],
                         "goal_rate": row["eval"]["mean_goal_rate"]} if "eval" in row else {}))))
    print(f"best return {result.best_return:.3f} at iteration {result.best_iteration}")
    print(f"weights: {Path(job.out_dir) / 'best_weights.bin'}")
    return 0


def _cmd_eval(args) -> int:
    scene_paths = sorted(str(p) for p in Path(args.scenes).glob("*.json"))
    if not scene_paths:
        raise ValidationError(f"no scene files in {args.scenes}")
    with open(args.weights, "rb") as fh:
        weights = fh.read()
    job = TrainJob(scenes=scene_paths, eval_episodes_per_scene=args.episodes)
    report, _, _ = evaluate(job, weights)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_plot(args) -> int:
    for p in plot_metrics(args.metrics, args.out):
        print(p)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "scene":
            return _cmd_scene(args)
        if args.command == "sim":
            return _cmd_sim_run(args)
        if args.command == "render":
            return _cmd_render(args)
        if args.command == "trajgen":
            return _cmd_trajgen(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "plot":
            return _cmd_plot(args)
        return USAGE_ERROR
    except (ValidationError, ParseError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return VALIDATION_ERROR
    except (DeskDriveError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
