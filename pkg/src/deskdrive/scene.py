"""Driving-scenario data model: maps, routes, logged object tracks, goals.

A scenario (one self-contained clip: map extract, route, replayed objects,
ego start, goal region) is the unit of training and testing. Scenes are
immutable after construction and safe to share across episode workers.
The on-disk form is canonical JSON: fixed key order and shortest-round-trip
floats, so identical scenes produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FuzzFailed, IoError, NotAFailure, ParseError, UnknownObject, ValidationError
from .geometry import (
    OrientedBox,
    Pose,
    boxes_overlap,
    lerp_angle,
    point_in_polygon,
    polygon_area,
)

OBJECT_KINDS = ("vehicle", "cyclist", "pedestrian")
LIGHT_STATES = ("red", "yellow", "green")
# Minimum duration a scene must cover: one full planning horizon.
MIN_DURATION = 3.0


@dataclass
class LaneSegment:
    lane_id: str
    centerline: list[Pose]
    width: float
    speed_limit: float
    successors: list[str] = field(default_factory=list)

    def centerline_xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.centerline])


@dataclass
class TrafficLight:
    lane_id: str
    timeline: list[tuple[float, str]]

    def state_at(self, t: float) -> str:
        state = self.timeline[0][1]
        for t_start, s in self.timeline:
            if t_start <= t:
                state = s
        return state


@dataclass
class ObjectTrack:
    object_id: str
    kind: str
    half_length: float
    half_width: float
    samples: list[tuple[float, Pose]]

    def span(self) -> tuple[float, float]:
        return self.samples[0][0], self.samples[-1][0]


@dataclass
class SceneMap:
    lanes: list[LaneSegment]
    traffic_lights: list[TrafficLight]
    crosswalks: list[np.ndarray]
    stop_signs: list[Pose]
    road_boundary: np.ndarray

    def lane(self, lane_id: str) -> LaneSegment:
        for lane in self.lanes:
            if lane.lane_id == lane_id:
                return lane
        raise KeyError(lane_id)

    def light_for(self, lane_id: str) -> TrafficLight | None:
        for tl in self.traffic_lights:
            if tl.lane_id == lane_id:
                return tl
        return None


@dataclass
class Scene:
    ads_id: str
    duration: float
    map: SceneMap
    route: list[str]
    ego_start: Pose
    ego_speed: float
    goal_region: np.ndarray
    tracks: list[ObjectTrack]

    def route_polyline(self) -> np.ndarray:
        pts = []
        for lane_id in self.route:
            for p in self.map.lane(lane_id).centerline:
                if not pts or (p.x, p.y) != pts[-1]:
                    pts.append((p.x, p.y))
        return np.array(pts)

    def track(self, object_id: str) -> ObjectTrack:
        for tr in self.tracks:
            if tr.object_id == object_id:
                return tr
        raise UnknownObject(object_id)


@dataclass(frozen=True)
class FuzzConfig:
    """Jitter magnitudes for scene synthesis by random relocation."""

    max_position_jitter: float = 1.0
    max_heading_jitter: float = 0.0
    max_speed_jitter: float = 0.0
    objects_affected: str = "both"  # ego_only | objects_only | both
    seed: int = 0

    def __post_init__(self):
        if min(self.max_position_jitter, self.max_heading_jitter, self.max_speed_jitter) < 0:
            raise ValueError("jitters must be >= 0")
        if self.objects_affected not in ("ego_only", "objects_only", "both"):
            raise ValueError(f"bad objects_affected {self.objects_affected!r}")


def validate_scene(scene: Scene) -> None:
    """Raise ValidationError naming the first violated invariant."""
    if scene.duration < MIN_DURATION:
        raise ValidationError(f"duration {scene.duration} shorter than planning horizon")
    lane_ids = set()
    for lane in scene.map.lanes:
        if lane.lane_id in lane_ids:
            raise ValidationError(f"duplicate lane id {lane.lane_id!r}")
        lane_ids.add(lane.lane_id)
        if len(lane.centerline) < 2:
            raise ValidationError(f"lane {lane.lane_id!r} centerline needs >= 2 points")
        for a, b in zip(lane.centerline, lane.centerline[1:]):
            if (a.x, a.y) == (b.x, b.y):
                raise ValidationError(f"lane {lane.lane_id!r} has coincident centerline points")
        if lane.width <= 0:
            raise ValidationError(f"lane {lane.lane_id!r} width must be > 0")
        if lane.speed_limit <= 0:
            raise ValidationError(f"lane {lane.lane_id!r} speed_limit must be > 0")
    for tl in scene.map.traffic_lights:
        if tl.lane_id not in lane_ids:
            raise ValidationError(f"traffic light references unknown lane {tl.lane_id!r}")
        starts = [t for t, _ in tl.timeline]
        if starts != sorted(starts):
            raise ValidationError(f"traffic light {tl.lane_id!r} timeline not sorted")
        if not tl.timeline or tl.timeline[0][0] > 0:
            raise ValidationError(f"traffic light {tl.lane_id!r} timeline does not cover t=0")
        for _, s in tl.timeline:
            if s not in LIGHT_STATES:
                raise ValidationError(f"traffic light state {s!r} unknown")
    for lane_id in scene.route:
        if lane_id not in lane_ids:
            raise ValidationError("route lane not in map")
    if len(scene.map.road_boundary) < 3:
        raise ValidationError("road boundary must be a polygon")
    if not point_in_polygon((scene.ego_start.x, scene.ego_start.y), scene.map.road_boundary):
        raise ValidationError("ego start outside road boundary")
    if len(scene.goal_region) < 3 or abs(polygon_area(scene.goal_region)) <= 0:
        raise ValidationError("goal region degenerate")
    seen = set()
    for tr in scene.tracks:
        if tr.object_id in seen:
            raise ValidationError(f"duplicate object id {tr.object_id!r}")
        seen.add(tr.object_id)
        if tr.kind not in OBJECT_KINDS:
            raise ValidationError(f"object kind {tr.kind!r} unknown")
        if tr.half_length <= 0 or tr.half_width <= 0:
            raise ValidationError(f"object {tr.object_id!r} box extents must be > 0")
        if len(tr.samples) < 1:
            raise ValidationError(f"object {tr.object_id!r} needs >= 1 sample")
        times = [t for t, _ in tr.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError(f"object {tr.object_id!r} samples not strictly increasing")


# ---------------------------------------------------------------------------
# File format


def _scene_to_dict(scene: Scene) -> dict:
    return {
        "ads_id": scene.ads_id,
        "duration_s": scene.duration,
        "map": {
            "lanes": [
                {
                    "id": lane.lane_id,
                    "centerline": [p.to_list() for p in lane.centerline],
                    "width": lane.width,
                    "speed_limit": lane.speed_limit,
                    "successors": list(lane.successors),
                }
                for lane in scene.map.lanes
            ],
            "traffic_lights": [
                {"lane_id": tl.lane_id, "timeline": [[t, s] for t, s in tl.timeline]}
                for tl in scene.map.traffic_lights
            ],
            "crosswalks": [np.asarray(c, dtype=float).tolist() for c in scene.map.crosswalks],
            "stop_signs": [p.to_list() for p in scene.map.stop_signs],
            "road_boundary": np.asarray(scene.map.road_boundary, dtype=float).tolist(),
        },
        "route": list(scene.route),
        "ego_start": {"pose": scene.ego_start.to_list(), "speed": scene.ego_speed},
        "goal_region": np.asarray(scene.goal_region, dtype=float).tolist(),
        "tracks": [
            {
                "object_id": tr.object_id,
                "kind": tr.kind,
                "half_length": tr.half_length,
                "half_width": tr.half_width,
                "samples": [[t, p.x, p.y, p.theta] for t, p in tr.samples],
            }
            for tr in scene.tracks
        ],
    }


def _require(d: dict, key: str, ctx: str):
    if key not in d:
        raise ParseError(f"{ctx}: missing field {key!r}")
    return d[key]


def _scene_from_dict(d: dict) -> Scene:
    try:
        map_d = _require(d, "map", "scene")
        lanes = []
        for i, ld in enumerate(_require(map_d, "lanes", "map")):
            lanes.append(
                LaneSegment(
                    lane_id=str(_require(ld, "id", f"lanes[{i}]")),
                    centerline=[Pose(*p) for p in _require(ld, "centerline", f"lanes[{i}]")],
                    width=float(_require(ld, "width", f"lanes[{i}]")),
                    speed_limit=float(_require(ld, "speed_limit", f"lanes[{i}]")),
                    successors=[str(s) for s in ld.get("successors", [])],
                )
            )
        lights = [
            TrafficLight(str(t["lane_id"]), [(float(a), str(b)) for a, b in t["timeline"]])
            for t in map_d.get("traffic_lights", [])
        ]
        crosswalks = [np.asarray(c, dtype=float) for c in map_d.get("crosswalks", [])]
        stop_signs = [Pose(*p) for p in map_d.get("stop_signs", [])]
        boundary = np.asarray(_require(map_d, "road_boundary", "map"), dtype=float)
        ego = _require(d, "ego_start", "scene")
        scene = Scene(
            ads_id=str(_require(d, "ads_id", "scene")),
            duration=float(_require(d, "duration_s", "scene")),
            map=SceneMap(lanes, lights, crosswalks, stop_signs, boundary),
            route=[str(r) for r in _require(d, "route", "scene")],
            ego_start=Pose(*_require(ego, "pose", "ego_start")),
            ego_speed=float(_require(ego, "speed", "ego_start")),
            goal_region=np.asarray(_require(d, "goal_region", "scene"), dtype=float),
            tracks=[
                ObjectTrack(
                    object_id=str(_require(td, "object_id", f"tracks[{i}]")),
                    kind=str(_require(td, "kind", f"tracks[{i}]")),
                    half_length=float(_require(td, "half_length", f"tracks[{i}]")),
                    half_width=float(_require(td, "half_width", f"tracks[{i}]")),
                    samples=[(float(s[0]), Pose(s[1], s[2], s[3])) for s in td["samples"]],
                )
                for i, td in enumerate(_require(d, "tracks", "scene"))
            ],
        )
    except ParseError:
        raise
    except (TypeError, KeyError, IndexError) as exc:
        raise ParseError(f"malformed scene structure: {exc}") from exc
    validate_scene(scene)
    return scene


def scene_to_json(scene: Scene) -> str:
    return json.dumps(_scene_to_dict(scene), indent=1)


def save_scene(scene: Scene, path) -> None:
    validate_scene(scene)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(scene_to_json(scene))
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write scene to {path}: {exc}") from exc


def load_scene(path) -> Scene:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read scene from {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return _scene_from_dict(data)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Field-for-field equality via the canonical serialization."""
    return scene_to_json(a) == scene_to_json(b)


# ---------------------------------------------------------------------------
# Interpolation


def object_box_at(scene: Scene, object_id: str, t: float) -> OrientedBox | None:
    """Oriented box of an object at time t, or None outside its track span.

    Pose is linearly interpolated between the bracketing samples; headings
    follow the shorter arc.
    """
    tr = scene.track(object_id)
    t0, t1 = tr.span()
    if t < t0 or t > t1:
        return None
    samples = tr.samples
    idx = 0
    for i, (ts, _) in enumerate(samples):
        if ts <= t:
            idx = i
    ta, pa = samples[idx]
    if idx == len(samples) - 1 or ta == t:
        pose = pa
    else:
        tb, pb = samples[idx + 1]
        frac = (t - ta) / (tb - ta)
        pose = Pose(
            pa.x + frac * (pb.x - pa.x),
            pa.y + frac * (pb.y - pa.y),
            lerp_angle(pa.theta, pb.theta, frac),
        )
    return OrientedBox(pose, tr.half_length, tr.half_width)


def _boxes_at_zero(scene: Scene, ego_box: OrientedBox | None) -> list[OrientedBox]:
    boxes = [] if ego_box is None else [ego_box]
    for tr in scene.tracks:
        box = object_box_at(scene, tr.object_id, 0.0)
        if box is not None:
            boxes.append(box)
    return boxes


# ---------------------------------------------------------------------------
# Synthesis by perturbation

EGO_HALF_LENGTH = 2.4
EGO_HALF_WIDTH = 1.0
MAX_FUZZ_ATTEMPTS = 100


def _box_inside(box: OrientedBox, boundary: np.ndarray) -> bool:
    return all(point_in_polygon(c, boundary) for c in box.corners())


def _offset_track(tr: ObjectTrack, dx: float, dy: float, dtheta: float) -> ObjectTrack:
    """Rigidly move a whole track: rotate about its t=0 position, then translate."""
    ox, oy = tr.samples[0][1].x, tr.samples[0][1].y
    c, s = math.cos(dtheta), math.sin(dtheta)
    new_samples = []
    for t, p in tr.samples:
        rx, ry = p.x - ox, p.y - oy
        new_samples.append(
            (t, Pose(ox + c * rx - s * ry + dx, oy + s * rx + c * ry + dy, p.theta + dtheta))
        )
    return ObjectTrack(tr.object_id, tr.kind, tr.half_length, tr.half_width, new_samples)


def routine_fuzz(scene: Scene, cfg: FuzzConfig) -> Scene:
    """Synthesize a new valid scene by randomly relocating ego and/or objects.

    Placements are rejection-resampled (up to 100 attempts per entity) until
    the entity stays inside the road boundary and does not overlap any other
    entity's t=0 box; the result is deterministic for a fixed (scene, cfg).
    """
    rng = np.random.default_rng(cfg.seed)
    affect_ego = cfg.objects_affected in ("ego_only", "both")
    affect_obj = cfg.objects_affected in ("objects_only", "both")
    boundary = scene.map.road_boundary

    def jitter(scale):
        return float(rng.uniform(-scale, scale)) if scale > 0 else 0.0

    ego_pose, ego_speed = scene.ego_start, scene.ego_speed
    obstacle_boxes = _boxes_at_zero(scene, None)
    if affect_ego:
        for attempt in range(MAX_FUZZ_ATTEMPTS):
            cand = Pose(
                scene.ego_start.x + jitter(cfg.max_position_jitter),
                scene.ego_start.y + jitter(cfg.max_position_jitter),
                scene.ego_start.theta + jitter(cfg.max_heading_jitter),
            )
            speed = max(0.0, scene.ego_speed + jitter(cfg.max_speed_jitter))
            box = OrientedBox(cand, EGO_HALF_LENGTH, EGO_HALF_WIDTH)
            if _box_inside(box, boundary) and not any(
                boxes_overlap(box, other) for other in obstacle_boxes
            ):
                ego_pose, ego_speed = cand, speed
                break
        else:
            raise FuzzFailed("no valid ego placement found")

    new_tracks: list[ObjectTrack] = list(scene.tracks)
    if affect_obj:
        ego_box = OrientedBox(ego_pose, EGO_HALF_LENGTH, EGO_HALF_WIDTH)
        placed: list[OrientedBox] = [ego_box]
        new_tracks = []
        remaining = list(scene.tracks)
        for i, tr in enumerate(remaining):
            others = [
                OrientedBox(t.samples[0][1], t.half_length, t.half_width)
                for t in remaining[i + 1 :]
                if t.samples[0][0] <= 0 <= t.samples[-1][0]
            ]
            for attempt in range(MAX_FUZZ_ATTEMPTS):
                moved = _offset_track(
                    tr,
                    jitter(cfg.max_position_jitter),
                    jitter(cfg.max_position_jitter),
                    jitter(cfg.max_heading_jitter),
                )
                t0, t1 = moved.span()
                if not (t0 <= 0 <= t1):
                    new_tracks.append(moved)
                    break
                box = OrientedBox(moved.samples[0][1], moved.half_length, moved.half_width)
                if _box_inside(box, boundary) and not any(
                    boxes_overlap(box, other) for other in placed + others
                ):
                    new_tracks.append(moved)
                    placed.append(box)
                    break
            else:
                raise FuzzFailed(f"no valid placement for object {tr.object_id!r}")

    fuzzed = Scene(
        ads_id=f"{scene.ads_id}#fuzz{cfg.seed}",
        duration=scene.duration,
        map=scene.map,
        route=list(scene.route),
        ego_start=ego_pose,
        ego_speed=ego_speed,
        goal_region=scene.goal_region,
        tracks=new_tracks,
    )
    validate_scene(fuzzed)
    return fuzzed


# ---------------------------------------------------------------------------
# Exploring tree

FAILURE_STATUSES = ("collision", "off_road", "wrong_direction", "dynamics_violation")


@dataclass(frozen=True)
class ReplaySeed:
    """Recipe for re-running a failed episode with a late stochastic branch.

    The logged actions are executed verbatim for t < branch_time; from the
    branch on, exploration resumes with the fresh seed.
    """

    scene_id: str
    source_seed: int
    branch_time: float
    explore_seed: int


def exploring_tree_seeds(log, n_branch: int, window: float) -> list[ReplaySeed]:
    """Branch points before the failure of a logged episode.

    Branch times are spaced uniformly over [t_fail - window, t_fail); each
    carries a distinct exploration seed derived from the source episode seed.
    """
    if log.status not in FAILURE_STATUSES:
        raise NotAFailure(f"episode ended with {log.status!r}")
    t_fail = log.steps[-1].t
    seeds = []
    ss = np.random.SeedSequence([int(log.seed) & 0xFFFFFFFF, 0x7EE5])
    children = ss.spawn(n_branch)
    for j in range(n_branch):
        t_b = t_fail - window + j * (window / n_branch)
        seeds.append(
            ReplaySeed(
                scene_id=log.scene_id,
                source_seed=log.seed,
                branch_time=max(0.0, t_b),
                explore_seed=int(children[j].generate_state(1)[0]),
            )
        )
    return seeds
