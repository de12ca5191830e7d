"""Training orchestration: parallel rollouts, iterate-train-select, evaluation.

One iteration runs every scene N times with distinct derived seeds (plus any
queued exploring-tree replays), aggregates the episode logs in a canonical
order independent of worker scheduling, performs a batch agent update, then
evaluates with mean actions and keeps the best weights seen so far. Workers
are stateless: each task is a pure function of (scene path, weight snapshot,
seeds), so a single-process run and an 8-worker run produce identical logs.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .action import ActionConfig, ExplorationConfig, PolarTrajectory
from .agents import PPOConfig, PPOTrainer, SACConfig, SACTrainer, behavior_clone
from .errors import DeskDriveError, WorkerFailure
from .nets import (
    AgentNets,
    NeuralPolicy,
    NetsSpec,
    params_from_bytes,
    params_to_bytes,
    spec_for_raster,
)
from .raster import RasterConfig
from .scene import ReplaySeed, Scene, exploring_tree_seeds, load_scene, routine_fuzz, save_scene, FuzzConfig
from .simkernel import (
    GOAL,
    COLLISION,
    OFF_ROAD,
    EpisodeConfig,
    EpisodeLog,
    RouteFollowPolicy,
    StraightPolicy,
    run_episode,
)
from .scene import FAILURE_STATUSES


# ---------------------------------------------------------------------------
# Job definition


@dataclass
class TrainJob:
    scenes: list[str]
    algorithm: str = "ppo"
    n_rollouts: int = 16
    n_iterations: int = 50
    workers: int = 1
    master_seed: int = 0
    out_dir: str = "runs/job"
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    explore: ExplorationConfig = field(default_factory=ExplorationConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    bc_episodes_per_scene: int = 2
    bc_epochs: int = 15
    bc_lr: float = 1e-3
    freeze_feature_after_bc: bool = True
    eval_every: int = 1
    eval_episodes_per_scene: int = 1
    goal_rate_threshold: float = 0.9
    mining: bool = False
    mining_fuzz_per_scene: int = 1
    mining_branches: int = 2
    mining_window: float = 2.0
    torch_threads: int = 1
    use_learned_std: bool = True

    def __post_init__(self):
        if self.n_rollouts < 1 or self.workers < 1:
            raise ValueError("n_rollouts and workers must be >= 1")
        if self.algorithm not in ("ppo", "sac"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    def nets_spec(self) -> NetsSpec:
        return spec_for_raster(self.episode.raster, self.episode.action)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainJob":
        d = dict(d)

        def sub(key, cls):
            if key in d and isinstance(d[key], dict):
                d[key] = cls(**d[key])

        if "episode" in d and isinstance(d["episode"], dict):
            e = dict(d["episode"])
            from .simkernel import ControllerConfig, DynamicsLimits, RewardConfig

            for k, cls in (
                ("action", ActionConfig),
                ("raster", RasterConfig),
                ("limits", DynamicsLimits),
                ("reward", RewardConfig),
                ("controller", ControllerConfig),
            ):
                if k in e and isinstance(e[k], dict):
                    e[k] = cls(**e[k])
            d["episode"] = EpisodeConfig(**e)
        sub("explore", ExplorationConfig)
        sub("ppo", PPOConfig)
        sub("sac", SACConfig)
        return TrainJob(**d)


def load_job(path) -> TrainJob:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return TrainJob.from_dict(d)


def save_job(job: TrainJob, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(job.to_dict(), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Workers


def make_pool(workers: int) -> ProcessPoolExecutor:
    """Episode worker pool. Workers are stateless; fork avoids re-importing
    __main__ and is safe here because worker tasks pin torch to one thread."""
    import multiprocessing as mp

    return ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork"))


_SCENE_CACHE: dict[str, Scene] = {}


def _get_scene(path: str) -> Scene:
    if path not in _SCENE_CACHE:
        _SCENE_CACHE[path] = load_scene(path)
    return _SCENE_CACHE[path]


def _make_policy(spec_name: str, scene: Scene, cfg: EpisodeConfig,
                 weights: bytes | None, nets_spec: NetsSpec | None,
                 use_learned_std: bool):
    if spec_name == "straight":
        return StraightPolicy()
    if spec_name == "route":
        return RouteFollowPolicy(scene, cfg.action)
    if spec_name == "neural":
        nets = params_from_bytes(weights, nets_spec)
        return NeuralPolicy(nets, use_learned_std=use_learned_std)
    raise ValueError(f"unknown policy {spec_name!r}")


def _episode_task(task: dict) -> list[tuple]:
    """Run a batch of episodes on one scene; returns (key, log-or-error) pairs."""
    torch.set_num_threads(task.get("torch_threads", 1))
    results = []
    try:
        scene = _get_scene(task["scene_path"])
        policy = _make_policy(
            task["policy"], scene, task["cfg"], task.get("weights"),
            task.get("nets_spec"), task.get("use_learned_std", True),
        )
    except Exception as exc:  # scene or weights unusable: fail every episode
        return [(spec[0], ("error", repr(exc))) for spec in task["episodes"]]
    for key, seed, replay in task["episodes"]:
        try:
            replay_actions = branch_time = None
            explore = task["explore"]
            if replay is not None:
                replay_actions = [PolarTrajectory(a) for a in replay["actions"]]
                branch_time = replay["branch_time"]
                seed = replay["explore_seed"]
            log = run_episode(
                scene,
                policy,
                task["cfg"],
                explore=explore,
                seed=seed,
                replay_actions=replay_actions,
                branch_time=branch_time,
                collect_obs=task["collect_obs"],
            )
            results.append((key, ("ok", log)))
        except Exception as exc:
            results.append((key, ("error", repr(exc))))
    return results


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _build_tasks(job: TrainJob, weights: bytes | None, iteration: int,
                 replays: list[dict] | None, collect_obs: bool,
                 explore: ExplorationConfig | None, policy: str,
                 episodes_per_scene: int, chunk: int = 4) -> list[dict]:
    tasks = []
    for scene_idx, path in enumerate(job.scenes):
        episodes = [
            ((scene_idx, r), derive_seed(job.master_seed, iteration, scene_idx, r), None)
            for r in range(episodes_per_scene)
        ]
        for rp in replays or []:
            if rp["scene_path"] == path:
                episodes.append(((scene_idx, rp["key"]), 0, rp))
        for start in range(0, len(episodes), chunk):
            tasks.append(
                {
                    "scene_path": path,
                    "episodes": episodes[start : start + chunk],
                    "policy": policy,
                    "weights": weights,
                    "nets_spec": job.nets_spec(),
                    "cfg": job.episode,
                    "explore": explore,
                    "collect_obs": collect_obs,
                    "use_learned_std": job.use_learned_std,
                    "torch_threads": job.torch_threads,
                }
            )
    return tasks


def _run_tasks(tasks: list[dict], pool: ProcessPoolExecutor | None):
    if pool is None:
        for task in tasks:
            yield from _episode_task(task)
    else:
        for res in pool.map(_episode_task, tasks):
            yield from res


def run_iteration(job: TrainJob, weights: bytes | None, iteration: int,
                  pool: ProcessPoolExecutor | None = None,
                  replays: list[dict] | None = None,
                  collect_obs: bool = True,
                  explore: ExplorationConfig | None = None,
                  policy: str = "neural",
                  episodes_per_scene: int | None = None):
    """Collect one iteration of episodes, canonically ordered by (scene, rollout).

    A failed episode is retried once; a second failure is recorded in the
    stats and the episode excluded. One scene's failure never blocks others.
    """
    torch.set_num_threads(job.torch_threads)
    n_eps = job.n_rollouts if episodes_per_scene is None else episodes_per_scene
    tasks = _build_tasks(job, weights, iteration, replays, collect_obs, explore,
                         policy, n_eps)
    results: dict[tuple, EpisodeLog] = {}
    failures: dict[tuple, str] = {}
    for key, (kind, payload) in _run_tasks(tasks, pool):
        if kind == "ok":
            results[key] = payload
        else:
            failures[key] = payload
    if failures:
        retry_keys = set(failures)
        retry_tasks = []
        for task in tasks:
            eps = [e for e in task["episodes"] if e[0] in retry_keys]
            if eps:
                retry_tasks.append({**task, "episodes": eps})
        for key, (kind, payload) in _run_tasks(retry_tasks, pool):
            if kind == "ok":
                results[key] = payload
                failures.pop(key, None)
            else:
                failures[key] = payload
    ordered = [results[k] for k in sorted(results)]
    stats = {
        "episodes": len(ordered),
        "failed": len(failures),
        "failures": {str(k): v for k, v in sorted(failures.items())},
        "mean_return": float(np.mean([l.return_g0 for l in ordered])) if ordered else 0.0,
        "goal_rate": float(np.mean([l.status == GOAL for l in ordered])) if ordered else 0.0,
    }
    return ordered, stats


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SceneEval:
    scene_id: str
    goal_rate: float
    collision_rate: float
    offroad_rate: float
    mean_return: float
    mean_abs_a_lat: float
    mean_abs_a_lon: float
    mean_length: float


@dataclass
class EvalReport:
    per_scene: list[SceneEval]
    goal_fraction: float  # fraction of scenes with goal rate >= threshold
    mean_return: float
    mean_goal_rate: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize_eval(logs_by_scene: dict[str, list[EpisodeLog]], threshold: float) -> EvalReport:
    per_scene = []
    for scene_id, logs in sorted(logs_by_scene.items()):
        lat, lon, total = [], [], 0
        for log in logs:
            prev_speed = None
            for s in log.steps:
                lat.append(abs(s.state.speed**2 * s.state.kappa))
                lon.append(abs(s.state.accel))
            total += len(log.steps)
        per_scene.append(
            SceneEval(
                scene_id=scene_id,
                goal_rate=float(np.mean([l.status == GOAL for l in logs])),
                collision_rate=float(np.mean([l.status == COLLISION for l in logs])),
                offroad_rate=float(np.mean([l.status == OFF_ROAD for l in logs])),
                mean_return=float(np.mean([sum(s.reward for s in l.steps) for l in logs])),
                mean_abs_a_lat=float(np.mean(lat)) if lat else 0.0,
                mean_abs_a_lon=float(np.mean(lon)) if lon else 0.0,
                mean_length=total / len(logs),
            )
        )
    return EvalReport(
        per_scene=per_scene,
        goal_fraction=float(np.mean([s.goal_rate >= threshold for s in per_scene])) if per_scene else 0.0,
        mean_return=float(np.mean([s.mean_return for s in per_scene])) if per_scene else 0.0,
        mean_goal_rate=float(np.mean([s.goal_rate for s in per_scene])) if per_scene else 0.0,
    )


def evaluate(job: TrainJob, weights: bytes | None, iteration: int = 0,
             pool: ProcessPoolExecutor | None = None, policy: str = "neural",
             collect_obs: bool = False):
    """Deterministic mean-action evaluation over the job's scene set."""
    logs, stats = run_iteration(
        job, weights, iteration, pool=pool, collect_obs=collect_obs,
        explore=None, policy=policy, episodes_per_scene=job.eval_episodes_per_scene,
    )
    by_scene: dict[str, list[EpisodeLog]] = {}
    for log in logs:
        by_scene.setdefault(log.scene_id, []).append(log)
    return summarize_eval(by_scene, job.goal_rate_threshold), logs, stats


# ---------------------------------------------------------------------------
# Failure mining


def failure_mining(job: TrainJob, report: EvalReport, eval_logs: list[EpisodeLog],
                   iteration: int, scene_dir: Path):
    """Fuzz the solved scenes; queue exploring-tree replays for the failures.

    Returns (new scene paths, replay job dicts consumable by run_iteration).
    """
    by_id = {Path(p).stem: p for p in job.scenes}
    id_by_scene = {}
    for p in job.scenes:
        try:
            id_by_scene[_get_scene(p).ads_id] = p
        except DeskDriveError:
            continue
    new_paths: list[str] = []
    replays: list[dict] = []
    good = {s.scene_id for s in report.per_scene if s.goal_rate >= job.goal_rate_threshold}
    scene_dir.mkdir(parents=True, exist_ok=True)
    for s in report.per_scene:
        path = id_by_scene.get(s.scene_id)
        if path is None:
            continue
        if s.scene_id in good:
            for j in range(job.mining_fuzz_per_scene):
                cfg = FuzzConfig(
                    max_position_jitter=2.0,
                    max_heading_jitter=0.1,
                    seed=derive_seed(job.master_seed, iteration, hash(s.scene_id) & 0xFFFF, j),
                )
                try:
                    fuzzed = routine_fuzz(_get_scene(path), cfg)
                except DeskDriveError:
                    continue
                out = scene_dir / f"{fuzzed.ads_id.replace('#', '_')}.json"
                save_scene(fuzzed, out)
                new_paths.append(str(out))
    key_counter = 10_000
    for log in eval_logs:
        if log.status not in FAILURE_STATUSES:
            continue
        path = id_by_scene.get(log.scene_id)
        if path is None:
            continue
        window = min(job.mining_window, max(job.episode.dt_sim, log.steps[-1].t - job.episode.dt_sim))
        for rs in exploring_tree_seeds(log, job.mining_branches, window):
            replays.append(
                {
                    "scene_path": path,
                    "key": key_counter,
                    "actions": [a.steps for a in log.actions()],
                    "branch_time": rs.branch_time,
                    "explore_seed": rs.explore_seed,
                }
            )
            key_counter += 1
    return new_paths, replays


# ---------------------------------------------------------------------------
# Expert data + training loop


def collect_expert_dataset(job: TrainJob, pool=None):
    """(obs, expert polar steps) pairs from the scripted route follower."""
    logs, _ = run_iteration(
        job, None, iteration=0, pool=pool, collect_obs=True, explore=None,
        policy="route", episodes_per_scene=job.bc_episodes_per_scene,
    )
    dataset = []
    for log in logs:
        for i, step in enumerate(log.steps):
            dataset.append(((log.observations[i], log.obs_speeds[i]), step.action.steps))
    return dataset


@dataclass
class TrainResult:
    nets: AgentNets
    best_weights: bytes
    best_return: float
    best_iteration: int
    metrics: list[dict]


def _make_trainer(job: TrainJob, nets: AgentNets):
    if job.algorithm == "ppo":
        return PPOTrainer(nets, job.ppo, job.episode.action, job.episode.limits)
    return SACTrainer(nets, job.sac, job.episode.action, job.episode.limits)


def _checkpoint(job: TrainJob, trainer, nets, iteration, best, metrics, path: Path):
    state = {
        "iteration": iteration,
        "params": params_to_bytes(nets),
        "best": best,
        "metrics": metrics,
        "kl_beta": getattr(trainer, "kl_beta", None),
    }
    if job.algorithm == "ppo":
        state["opt"] = trainer.opt.state_dict()
    else:
        state["opt_q"] = trainer.opt_q.state_dict()
        state["opt_pi"] = trainer.opt_pi.state_dict()
        state["opt_alpha"] = trainer.opt_alpha.state_dict()
        state["log_alpha"] = float(trainer.log_alpha.detach())
        state["targets"] = params_to_bytes(trainer.targets)
        state["buffer"] = trainer.buffer
    with open(path, "wb") as fh:
        pickle.dump(state, fh)


def load_checkpoint(path, job: TrainJob):
    with open(path, "rb") as fh:
        state = pickle.load(fh)
    nets = params_from_bytes(state["params"], job.nets_spec())
    trainer = _make_trainer(job, nets)
    if job.freeze_feature_after_bc:
        nets.freeze("feature")
        trainer_refresh_params(job, trainer, nets)
    if job.algorithm == "ppo":
        trainer.opt.load_state_dict(state["opt"])
        if state.get("kl_beta") is not None:
            trainer.kl_beta = state["kl_beta"]
    else:
        trainer.opt_q.load_state_dict(state["opt_q"])
        trainer.opt_pi.load_state_dict(state["opt_pi"])
        trainer.opt_alpha.load_state_dict(state["opt_alpha"])
        with torch.no_grad():
            trainer.log_alpha.fill_(state["log_alpha"])
        trainer.targets = params_from_bytes(state["targets"], job.nets_spec())
        trainer.buffer = state["buffer"]
    return state, nets, trainer


def trainer_refresh_params(job: TrainJob, trainer, nets):
    """Rebuild optimizers after the freeze mask changed."""
    if job.algorithm == "ppo":
        trainer.opt = torch.optim.Adam(nets.trainable(), lr=job.ppo.lr)
    else:
        trainer.opt_q = torch.optim.Adam(
            nets.trainable("q1", "q2") + nets.trainable("feature"), lr=job.sac.lr_q
        )
        trainer.opt_pi = torch.optim.Adam(nets.trainable("pi"), lr=job.sac.lr_pi)


def train(job: TrainJob, resume_from=None, progress=None) -> TrainResult:
    """Full iterate-train-select loop; checkpoints every iteration."""
    torch.set_num_threads(job.torch_threads)
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    metrics: list[dict] = []

    pool = None
    if job.workers > 1:
        pool = make_pool(job.workers)
    try:
        if resume_from is not None:
            state, nets, trainer = load_checkpoint(resume_from, job)
            start_iter = state["iteration"] + 1
            best = state["best"]
            metrics = list(state["metrics"])
        else:
            nets = AgentNets(job.nets_spec(), seed=job.master_seed)
            if job.bc_epochs > 0:
                dataset = collect_expert_dataset(job, pool)
                bc_losses = behavior_clone(
                    dataset, nets, job.bc_epochs, job.bc_lr,
                    seed=derive_seed(job.master_seed, 0xBC),
                )
                metrics.append({"kind": "bc", "losses": bc_losses, "samples": len(dataset)})
            if job.freeze_feature_after_bc:
                nets.freeze("feature")
            trainer = _make_trainer(job, nets)
            best = {"weights": params_to_bytes(nets), "return": -math.inf,
                    "collision": math.inf, "iteration": -1}
            start_iter = 0

        replays: list[dict] = []
        for it in range(start_iter, job.n_iterations):
            weights = params_to_bytes(nets)
            logs, roll_stats = run_iteration(
                job, weights, it, pool=pool, replays=replays,
                collect_obs=True, explore=job.explore, policy="neural",
            )
            replays = []
            if job.algorithm == "ppo":
                update_info = trainer.update(logs, seed=derive_seed(job.master_seed, it, 0xA11))
            else:
                trainer.push_episodes(logs)
                update_info = trainer.update(
                    job.sac.updates_per_iteration, seed=derive_seed(job.master_seed, it, 0x5AC)
                )
            row = {"kind": "iteration", "iteration": it, "rollout": roll_stats,
                   "update": update_info}
            if (it + 1) % job.eval_every == 0 or it == job.n_iterations - 1:
                report, eval_logs, _ = evaluate(job, params_to_bytes(nets), iteration=it, pool=pool)
                row["eval"] = report.to_dict()
                better = report.mean_return > best["return"] or (
                    report.mean_return == best["return"]
                    and np.mean([s.collision_rate for s in report.per_scene] or [0])
                    < best["collision"]
                )
                if better:
                    best = {
                        "weights": params_to_bytes(nets),
                        "return": report.mean_return,
                        "collision": float(np.mean([s.collision_rate for s in report.per_scene] or [0])),
                        "iteration": it,
                    }
                if job.mining:
                    new_paths, replays = failure_mining(job, report, eval_logs, it, out / "mined")
                    job.scenes = job.scenes + new_paths
                    row["mining"] = {"fuzzed": len(new_paths), "replays": len(replays)}
            metrics.append(row)
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
            _checkpoint(job, trainer, nets, it, best, metrics, out / f"checkpoint_{it:04d}.pkl")
            if progress is not None:
                progress(row)
    finally:
        if pool is not None:
            pool.shutdown()

    with open(out / "best_weights.bin", "wb") as fh:
        fh.write(best["weights"])
    return TrainResult(nets, best["weights"], best["return"], best["iteration"], metrics)
