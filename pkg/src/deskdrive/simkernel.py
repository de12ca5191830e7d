"""Closed-loop episode engine.

Each control tick: render the observation, let the policy emit a polar
trajectory distribution, sample (or take the projected mean of) an action,
densify it with the minimum-jerk smoother, execute one tick of a pure-pursuit
+ proportional-speed controller on a kinematic bicycle, then evaluate
termination and reward. Episodes are pure functions of (scene, policy
weights, seed): two runs produce bit-identical logs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import trajgen
from .action import (
    ActionConfig,
    ExplorationConfig,
    ExplorationStats,
    FeasibleRanges,
    PolarTrajectory,
    PolicyOutput,
    Trajectory,
    feasible_ranges,
    polar_to_cartesian,
    project_to_ranges,
    sample_polar_exploration,
    sample_cartesian_disc,
    disc_log_prob,
    cartesian_to_polar,
)
from .errors import DegenerateTrajectory, DeskDriveError
from .geometry import OrientedBox, Pose, angle_diff, boxes_overlap, point_in_polygon, project_to_polyline
from .raster import ObservationStack, RasterConfig, render_observation
from .scene import Scene, object_box_at

RUNNING = "running"
GOAL = "goal"
COLLISION = "collision"
OFF_ROAD = "off_road"
WRONG_DIRECTION = "wrong_direction"
DYNAMICS_VIOLATION = "dynamics_violation"
RECORD_END = "record_end"
TERMINAL_STATUSES = (GOAL, COLLISION, OFF_ROAD, WRONG_DIRECTION, DYNAMICS_VIOLATION, RECORD_END)


@dataclass(frozen=True)
class DynamicsLimits:
    a_max: float = 3.0
    omega_max: float = 0.6
    kappa_max: float = 0.2
    jerk_max: float = 40.0
    steer_rate_max: float = 0.5

    def __post_init__(self):
        if min(self.a_max, self.omega_max, self.kappa_max, self.jerk_max, self.steer_rate_max) <= 0:
            raise ValueError("all dynamics limits must be > 0")


@dataclass(frozen=True)
class RewardConfig:
    r_goal: float = 100.0
    w_collision: float = 100.0
    w_offroad: float = 100.0
    w_wrongdir: float = 100.0
    w_lat: float = 0.01
    w_lon: float = 0.01
    gamma: float = 0.99

    def __post_init__(self):
        if self.r_goal <= 0 or not 0 < self.gamma < 1:
            raise ValueError("need r_goal > 0 and gamma in (0, 1)")
        if min(self.w_collision, self.w_offroad, self.w_wrongdir, self.w_lat, self.w_lon) < 0:
            raise ValueError("penalty weights must be >= 0")


@dataclass(frozen=True)
class EgoState:
    pose: Pose
    speed: float
    accel: float = 0.0
    kappa: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class ControllerConfig:
    lookahead_min: float = 2.0  # L_min, meters
    lookahead_speed_gain: float = 0.5  # k_L, seconds of travel
    speed_gain: float = 8.0  # proportional gain on speed error, 1/s


@dataclass(frozen=True)
class EpisodeConfig:
    """Everything an episode needs beyond the scene and policy."""

    action: ActionConfig = ActionConfig()
    raster: RasterConfig = RasterConfig()
    limits: DynamicsLimits = DynamicsLimits()
    reward: RewardConfig = RewardConfig()
    controller: ControllerConfig = ControllerConfig()
    dt_sim: float = 0.2
    dense_dt: float = 0.05
    w_anchor: float = 10.0
    smooth_max_iter: int = 400
    ego_half_length: float = 2.4
    ego_half_width: float = 1.0
    t_wrong: float = 2.0
    dynamics_tolerance: float = 0.1

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def track_step(state: EgoState, traj: Trajectory, limits: DynamicsLimits,
               dt: float, ctrl: ControllerConfig = ControllerConfig()) -> EgoState:
    """One control tick: pure pursuit for curvature, P-control for speed.

    traj is in the frame of the current ego pose (x forward). A leading
    origin point is implied if the trajectory does not start at the origin.
    The state then advances under the kinematic bicycle update.
    """
    pts = traj.xy
    if len(pts) < 1 or (len(pts) < 2 and np.linalg.norm(pts[0]) == 0):
        raise DegenerateTrajectory("trajectory needs at least one point ahead")
    if float(np.linalg.norm(pts[0])) > 1e-12:
        pts = np.vstack([[0.0, 0.0], pts])
    if float(np.abs(np.diff(pts, axis=0)).max(initial=0.0)) == 0.0:
        raise DegenerateTrajectory("all trajectory points coincide")

    # speed implied by the plan over one control tick (>= one trajectory arc)
    n_arc = max(1, min(int(round(dt / traj.dt)), len(pts) - 1))
    seg_head = np.linalg.norm(np.diff(pts[: n_arc + 1], axis=0), axis=1)
    s_target = float(seg_head.sum()) / (n_arc * traj.dt)
    a = float(np.clip(ctrl.speed_gain * (s_target - state.speed), -limits.a_max, limits.a_max))

    lookahead = max(ctrl.lookahead_min, ctrl.lookahead_speed_gain * state.speed)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    idx = int(np.searchsorted(cum, lookahead, side="left"))
    if idx >= len(pts):
        target = pts[-1]
    else:
        prev_cum = cum[idx - 1] if idx > 0 else 0.0
        frac = 0.0 if seg[idx - 1] == 0 else (lookahead - prev_cum) / seg[idx - 1]
        target = pts[idx - 1] + frac * (pts[idx] - pts[idx - 1]) if idx > 0 else pts[0]
    d2 = float(target @ target)
    kappa_cmd = 0.0 if d2 < 1e-12 else 2.0 * float(target[1]) / d2
    kappa_cmd = float(np.clip(kappa_cmd, -limits.kappa_max, limits.kappa_max))
    kappa = float(
        np.clip(
            kappa_cmd,
            state.kappa - limits.steer_rate_max * dt,
            state.kappa + limits.steer_rate_max * dt,
        )
    )

    s = state.speed
    pose = state.pose
    new_pose = Pose(
        pose.x + s * math.cos(pose.theta) * dt,
        pose.y + s * math.sin(pose.theta) * dt,
        pose.theta + s * kappa * dt,
    )
    s_new = max(0.0, s + a * dt)
    realized_a = (s_new - s) / dt
    return EgoState(new_pose, s_new, realized_a, kappa, state.t + dt)


class StatusChecker:
    """Applies the termination rules in fixed priority order.

    Wrong-direction needs a persistence window, so the checker carries the
    accumulated misalignment time across ticks of one episode.
    """

    def __init__(self, scene: Scene, limits: DynamicsLimits, cfg: EpisodeConfig):
        self.scene = scene
        self.limits = limits
        self.cfg = cfg
        self.route_xy = scene.route_polyline() if scene.route else None
         # route with a single point cannot define a tangent
        if self.route_xy is not None and len(self.route_xy) < 2:
            self.route_xy = None
        self.wrongdir_s = 0.0

    def ego_box(self, state: EgoState) -> OrientedBox:
        return OrientedBox(state.pose, self.cfg.ego_half_length, self.cfg.ego_half_width)

    def check(self, state: EgoState, prev: EgoState, dt: float) -> str:
        scene, limits = self.scene, self.limits
        box = self.ego_box(state)
        for tr in scene.tracks:
            other = object_box_at(scene, tr.object_id, state.t)
            if other is not None and boxes_overlap(box, other):
                return COLLISION
        if any(not point_in_polygon(c, scene.map.road_boundary) for c in box.corners()):
            return OFF_ROAD
        if self.route_xy is not None:
            _, _, tangent = project_to_polyline(self.route_xy, (state.pose.x, state.pose.y))
            if abs(angle_diff(state.pose.theta, tangent)) > math.pi / 2:
                self.wrongdir_s += dt
            else:
                self.wrongdir_s = 0.0
            if self.wrongdir_s >= self.cfg.t_wrong:
                return WRONG_DIRECTION
        tol = 1.0 + self.cfg.dynamics_tolerance
        jerk = (state.accel - prev.accel) / dt
        if abs(state.accel) > limits.a_max * tol or abs(jerk) > limits.jerk_max * tol:
            return DYNAMICS_VIOLATION
        if point_in_polygon((state.pose.x, state.pose.y), scene.goal_region):
            return GOAL
        if state.t >= scene.duration - 1e-9:
            return RECORD_END
        return RUNNING


def check_status(state: EgoState, prev: EgoState, scene: Scene,
                 limits: DynamicsLimits, cfg: EpisodeConfig = EpisodeConfig(),
                 dt: float | None = None) -> str:
    """Single-shot status check (fresh persistence window)."""
    checker = StatusChecker(scene, limits, cfg)
    return checker.check(state, prev, dt if dt is not None else cfg.dt_sim)


def step_reward(state: EgoState, prev: EgoState, status: str,
                cfg: RewardConfig, dt: float) -> float:
    """Sparse terminal terms plus quadratic comfort penalties."""
    a_lon = (state.speed - prev.speed) / dt
    a_lat = state.speed**2 * state.kappa
    r = -cfg.w_lat * a_lat**2 - cfg.w_lon * a_lon**2
    if status == GOAL:
        r += cfg.r_goal
    elif status == COLLISION:
        r -= cfg.w_collision
    elif status == OFF_ROAD:
        r -= cfg.w_offroad
    elif status == WRONG_DIRECTION:
        r -= cfg.w_wrongdir
    return r


# ---------------------------------------------------------------------------
# Episode logs


@dataclass
class StepRecord:
    t: float
    state: EgoState
    obs_digest: str
    action: PolarTrajectory
    log_prob: float | None
    reward: float
    status: str
    fallback: bool = False


@dataclass
class EpisodeLog:
    scene_id: str
    seed: int
    config_digest: str
    steps: list[StepRecord]
    return_g0: float
    status: str
    metadata: dict = field(default_factory=dict)
    # Training payloads, not serialized: per-step channel stacks and speeds.
    observations: list[np.ndarray] | None = None
    obs_speeds: list[float] | None = None

    def actions(self) -> list[PolarTrajectory]:
        return [s.action for s in self.steps]

    def to_jsonl(self) -> str:
        lines = [json.dumps({
            "scene_id": self.scene_id,
            "seed": self.seed,
            "config": self.config_digest,
        })]
        for s in self.steps:
            lines.append(json.dumps({
                "t": s.t,
                "state": [s.state.pose.x, s.state.pose.y, s.state.pose.theta,
                          s.state.speed, s.state.accel, s.state.kappa],
                "obs": s.obs_digest,
                "dr": s.action.steps[:, 0].tolist(),
                "dphi": s.action.steps[:, 1].tolist(),
                "log_prob": s.log_prob,
                "reward": s.reward,
                "status": s.status,
                "fallback": s.fallback,
            }))
        lines.append(json.dumps({
            "status": self.status,
            "return": self.return_g0,
            "metadata": self.metadata,
        }))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "EpisodeLog":
        lines = [json.loads(ln) for ln in text.strip().splitlines()]
        head, *steps, foot = lines
        records = []
        for d in steps:
            x, y, th, sp, ac, ka = d["state"]
            records.append(StepRecord(
                t=d["t"],
                state=EgoState(Pose(x, y, th), sp, ac, ka, d["t"]),
                obs_digest=d["obs"],
                action=PolarTrajectory(np.column_stack([d["dr"], d["dphi"]])),
                log_prob=d["log_prob"],
                reward=d["reward"],
                status=d["status"],
                fallback=d.get("fallback", False),
            ))
        return EpisodeLog(head["scene_id"], head["seed"], head["config"], records,
                          foot["return"], foot["status"], foot.get("metadata", {}))


def save_log(log: EpisodeLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(log.to_jsonl())


def load_log(path) -> EpisodeLog:
    with open(path, "r", encoding="utf-8") as fh:
        return EpisodeLog.from_jsonl(fh.read())


# ---------------------------------------------------------------------------
# Policies


class StraightPolicy:
    """Continue straight at the current speed."""

    def plan(self, obs: ObservationStack, state: EgoState,
             cfg: ActionConfig = ActionConfig()) -> PolicyOutput:
        n = cfg.n_points
        return PolicyOutput(np.full(n, state.speed * cfg.delta_t), np.zeros(n))


class RouteFollowPolicy:
    """Scripted expert: follow the route centerline at a cruise speed.

    Plans points on the route ahead, accelerating smoothly toward a fraction
    of the first route lane's speed limit. Used for evaluation fixtures and
    for generating behavior-cloning datasets.
    """

    def __init__(self, scene: Scene, cfg: ActionConfig = ActionConfig(),
                 cruise_frac: float = 0.8, accel: float = 1.5,
                 lateral_decay: float = 0.7, lat_accel_budget: float = 2.0):
        self.scene = scene
        self.cfg = cfg
        self.route_xy = scene.route_polyline()
        self.cruise = cruise_frac * min(
            scene.map.lane(lid).speed_limit for lid in scene.route
        )
        self.accel = accel
        self.lateral_decay = lateral_decay
        self._profile_ds = 1.0
        self._speed_profile = self._build_speed_profile(lat_accel_budget, decel=2.0)

    def _build_speed_profile(self, lat_budget: float, decel: float) -> np.ndarray:
        """Curvature-limited speed per meter of route, with braking lookahead."""
        from .geometry import frame_at_arclength, polyline_lengths

        total = float(polyline_lengths(self.route_xy)[-1])
        n = max(2, int(total / self._profile_ds) + 1)
        arcs = np.linspace(0.0, total, n)
        ds = arcs[1] - arcs[0]
        v = np.full(n, self.cruise)
        for i in range(n):
            _, th0 = frame_at_arclength(self.route_xy, max(0.0, arcs[i] - 1.0))
            _, th1 = frame_at_arclength(self.route_xy, min(total, arcs[i] + 1.0))
            kappa = abs(angle_diff(th1, th0)) / 2.0
            if kappa > 1e-4:
                v[i] = min(v[i], math.sqrt(lat_budget / kappa))
        for i in range(n - 2, -1, -1):  # brake early enough for the slow spots
            v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * decel * ds))
        return v

    def _target_speed(self, arc: float) -> float:
        idx = arc / self._profile_ds
        i = int(min(max(idx, 0.0), len(self._speed_profile) - 1))
        return float(self._speed_profile[i])

    def plan(self, obs: ObservationStack, state: EgoState) -> PolicyOutput:
        from .geometry import frame_at_arclength

        cfg = self.cfg
        s0, offset, tangent = project_to_polyline(self.route_xy, (state.pose.x, state.pose.y))
        base, tang = frame_at_arclength(self.route_xy, s0)
        # signed lateral error: positive if the ego sits left of the route
        to_ego = np.array([state.pose.x, state.pose.y]) - base
        e0 = float(-math.sin(tang) * to_ego[0] + math.cos(tang) * to_ego[1])
        c, s = math.cos(state.pose.theta), math.sin(state.pose.theta)
        pts = np.zeros((cfg.n_points, 3))
        speed = state.speed
        arc = s0
        err = e0
        for k in range(cfg.n_points):
            target = self._target_speed(arc + speed * cfg.delta_t)
            if target >= speed:
                new_speed = min(target, speed + self.accel * cfg.delta_t)
            else:
                new_speed = max(target, speed - 2.0 * cfg.delta_t)
            arc += 0.5 * (speed + new_speed) * cfg.delta_t  # trapezoidal, stays realizable
            speed = new_speed
            err *= self.lateral_decay
            p, th = frame_at_arclength(self.route_xy, arc)
            p = p + err * np.array([-math.sin(th), math.cos(th)])
            dx, dy = p[0] - state.pose.x, p[1] - state.pose.y
            pts[k] = (c * dx + s * dy, -s * dx + c * dy, 0.0)
        traj = Trajectory(pts, cfg.delta_t)
        polar = cartesian_to_polar(traj, cfg)
        return PolicyOutput(polar.steps[:, 0], polar.steps[:, 1])


# ---------------------------------------------------------------------------
# Episode loop


def run_episode(scene: Scene, policy, cfg: EpisodeConfig,
                explore: ExplorationConfig | None = None, seed: int = 0,
                replay_actions: list[PolarTrajectory] | None = None,
                branch_time: float | None = None,
                collect_obs: bool = False) -> EpisodeLog:
    """Run one closed-loop episode to termination.

    With replay_actions + branch_time set, logged actions are executed
    verbatim while t < branch_time and exploration resumes from the branch
    on (the exploring-tree contract). Deterministic given all arguments.
    """
    acfg, limits = cfg.action, cfg.limits
    dt = cfg.dt_sim
    state = EgoState(scene.ego_start, scene.ego_speed, 0.0, 0.0, 0.0)
    checker = StatusChecker(scene, limits, cfg)
    history: list[Pose] = [state.pose]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    stats = ExplorationStats()
    if hasattr(policy, "reset"):
        policy.reset()

    steps: list[StepRecord] = []
    observations: list[np.ndarray] | None = [] if collect_obs else None
    obs_speeds: list[float] | None = [] if collect_obs else None
    g0, disc = 0.0, 1.0
    fallback_count = 0
    max_steps = int(math.ceil(scene.duration / dt)) + 1

    for k in range(max_steps):
        obs = render_observation(scene, state.pose, state.t, state.speed, history, cfg.raster)
        status = DYNAMICS_VIOLATION
        action = PolarTrajectory(np.zeros((acfg.n_points, 2)))
        logp: float | None = None
        fellback = False
        try:
            ranges = feasible_ranges(state.speed, limits, acfg)
            replaying = (
                replay_actions is not None
                and branch_time is not None
                and state.t < branch_time - 1e-9
                and k < len(replay_actions)
            )
            if replaying:
                action = replay_actions[k]
            else:
                out = policy.plan(obs, state)
                if explore is None:
                    action = project_to_ranges(out, ranges)
                elif explore.scheme == "cartesian_disc":
                    mean_traj = polar_to_cartesian(project_to_ranges(out, ranges), acfg)
                    sampled = sample_cartesian_disc(mean_traj, rng)
                    action = cartesian_to_polar(sampled, acfg)
                    logp = disc_log_prob(sampled, mean_traj)
                else:
                    action, logp = sample_polar_exploration(out, ranges, explore, rng, stats)
            traj = polar_to_cartesian(action, acfg)
            sm = trajgen.smooth(traj, state, limits, acfg, dense_dt=cfg.dense_dt,
                                w_anchor=cfg.w_anchor, max_iter=cfg.smooth_max_iter)
            fellback = sm.fallback
            fallback_count += int(sm.fallback)
            next_state = track_step(state, sm.trajectory, limits, dt, cfg.controller)
            status = checker.check(next_state, state, dt)
        except DeskDriveError:
            next_state = state
            status = DYNAMICS_VIOLATION
        reward = step_reward(next_state, state, status, cfg.reward, dt)
        steps.append(StepRecord(next_state.t, next_state, obs.digest(), action,
                                logp, reward, status, fellback))
        if collect_obs:
            observations.append(obs.channels())
            obs_speeds.append(obs.ego_speed)
        g0 += disc * reward
        disc *= cfg.reward.gamma
        state = next_state
        history.append(state.pose)
        if status != RUNNING:
            break

    if steps and steps[-1].status == RUNNING:
        # duration guard: close out as end-of-record
        steps[-1].status = RECORD_END

    return EpisodeLog(
        scene_id=scene.ads_id,
        seed=int(seed),
        config_digest=cfg.digest(),
        steps=steps,
        return_g0=g0,
        status=steps[-1].status if steps else RECORD_END,
        metadata={
            "explore_samples": stats.samples,
            "mean_clipped": stats.mean_clipped,
            "fallback_count": fallback_count,
        },
        observations=observations,
        obs_speeds=obs_speeds,
    )
