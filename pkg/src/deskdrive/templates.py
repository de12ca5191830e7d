"""Deterministic synthetic scenes for the standard driving categories.

Real on-road clips are not shipped with the package, so tests and desk-scale
training use parametric templates instead: straight road, left/right turn,
and straight-through-intersection, optionally populated with replayed
objects (parked and lead vehicles, crossing pedestrians). A template plus a
seed always yields the same scene.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Pose, point_at_arclength, polyline_lengths
from .scene import LaneSegment, ObjectTrack, Scene, SceneMap, TrafficLight, validate_scene

DEFAULT_LANE_WIDTH = 3.6
DEFAULT_SPEED_LIMIT = 10.0
POINT_SPACING = 2.0


def _poses_along(xy: np.ndarray) -> list[Pose]:
    poses = []
    for i in range(len(xy)):
        if i < len(xy) - 1:
            d = xy[i + 1] - xy[i]
        else:
            d = xy[i] - xy[i - 1]
        poses.append(Pose(xy[i, 0], xy[i, 1], math.atan2(d[1], d[0])))
    return poses


def _line(p0, p1, spacing=POINT_SPACING) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / spacing)) + 1)
    return np.linspace(p0, p1, n)


def _arc(center, radius, a0, a1, spacing=POINT_SPACING) -> np.ndarray:
    n = max(3, int(math.ceil(abs(a1 - a0) * radius / spacing)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])


def _band_polygon(xy: np.ndarray, half_width: float) -> np.ndarray:
    from .geometry import offset_band

    return offset_band(xy, half_width)


def _goal_square(xy_end: np.ndarray, heading: float, depth: float, width: float) -> np.ndarray:
    f = np.array([math.cos(heading), math.sin(heading)])
    l = np.array([-f[1], f[0]])
    c = np.asarray(xy_end, float)
    return np.array(
        [c - l * width / 2, c + l * width / 2, c + f * depth + l * width / 2, c + f * depth - l * width / 2]
    )


def _static_track(object_id: str, kind: str, pose: Pose, duration: float,
                  half_length: float, half_width: float) -> ObjectTrack:
    return ObjectTrack(object_id, kind, half_length, half_width,
                       [(0.0, pose), (duration, pose)])


def _moving_track(object_id: str, kind: str, path: np.ndarray, speed: float,
                  t_start: float, duration: float, half_length: float,
                  half_width: float) -> ObjectTrack:
    cum = polyline_lengths(path)
    total = float(cum[-1])
    samples = []
    t = t_start
    s = 0.0
    poses = _poses_along(path)
    while s <= total and t <= duration:
        p = point_at_arclength(path, s)
        i = min(int(np.searchsorted(cum, s, side="right")), len(poses) - 1)
        samples.append((t, Pose(p[0], p[1], poses[i].theta)))
        t += 0.5
        s += speed * 0.5
    if len(samples) < 2:
        samples.append((t, samples[-1][1]))
    return ObjectTrack(object_id, kind, half_length, half_width, samples)


def _populate(rng: np.random.Generator, route_xy: np.ndarray, lane_width: float,
              n_objects: int, duration: float, speed_limit: float) -> list[ObjectTrack]:
    """Objects that do not block the route: parked cars beside it, crossers
    timed to clear before the ego arrives, and lead vehicles driving ahead."""
    tracks = []
    total = float(polyline_lengths(route_xy)[-1])
    cruise = 0.8 * speed_limit
    for i in range(n_objects):
        kind_pick = rng.integers(0, 3)
        s = float(rng.uniform(0.35, 0.85)) * total
        p = point_at_arclength(route_xy, s)
        p_next = point_at_arclength(route_xy, min(s + 1.0, total))
        heading = math.atan2(p_next[1] - p[1], p_next[0] - p[0])
        left = np.array([-math.sin(heading), math.cos(heading)])
        if kind_pick == 0:
            side = 1.0 if rng.random() < 0.5 else -1.0
            pose = Pose(*(p + side * lane_width * 0.9 * left), heading)
            tracks.append(_static_track(f"parked{i}", "vehicle", pose, duration, 2.2, 0.9))
        elif kind_pick == 1:
            path = np.vstack([p - left * lane_width, p + left * lane_width])
            crossing_time = 2.0 * lane_width / 1.5
            eta = s / cruise
            t_start = max(0.0, eta - crossing_time - 4.0) if eta > crossing_time + 4.0 else eta + 4.0
            tracks.append(
                _moving_track(f"ped{i}", "pedestrian", path, 1.5, t_start, duration, 0.3, 0.3)
            )
        else:
            ahead = min(s + 25.0, total - 1.0)
            if total - ahead < 25.0:
                # not enough runway for a moving lead: park it beside the lane
                side = 1.0 if rng.random() < 0.5 else -1.0
                pose = Pose(*(p + side * lane_width * 0.9 * left), heading)
                tracks.append(_static_track(f"lead{i}", "vehicle", pose, duration, 2.2, 0.9))
            else:
                path = np.vstack([point_at_arclength(route_xy, ss)
                                  for ss in np.arange(ahead, total, 2.0)])
                tracks.append(
                    _moving_track(f"lead{i}", "vehicle", path, speed_limit * 0.8, 0.0,
                                  duration, 2.2, 0.9)
                )
    return tracks


def _assemble(ads_id: str, lanes: list[LaneSegment], route: list[str],
              route_xy: np.ndarray, lane_width: float, speed_limit: float,
              tracks: list[ObjectTrack], duration: float,
              lights: list[TrafficLight] | None = None,
              crosswalks: list[np.ndarray] | None = None,
              road_half_width: float | None = None) -> Scene:
    half = road_half_width if road_half_width is not None else 1.6 * lane_width
    # extend the band past the route ends so the ego box and goal fit inside
    d0 = route_xy[0] - route_xy[1]
    d0 = d0 / np.linalg.norm(d0)
    d1 = route_xy[-1] - route_xy[-2]
    d1 = d1 / np.linalg.norm(d1)
    band_xy = np.vstack([route_xy[0] + 6.0 * d0, route_xy, route_xy[-1] + 8.0 * d1])
    boundary = _band_polygon(band_xy, half)
    end = route_xy[-1]
    prev = route_xy[-2]
    heading = math.atan2(end[1] - prev[1], end[0] - prev[0])
    goal = _goal_square(end - 2.0 * np.array([math.cos(heading), math.sin(heading)]),
                        heading, 6.0, 2.0 * lane_width)
    start_heading = math.atan2(route_xy[1][1] - route_xy[0][1], route_xy[1][0] - route_xy[0][0])
    scene = Scene(
        ads_id=ads_id,
        duration=duration,
        map=SceneMap(lanes, lights or [], crosswalks or [], [], boundary),
        route=route,
        ego_start=Pose(route_xy[0][0], route_xy[0][1], start_heading),
        ego_speed=0.6 * speed_limit,
        goal_region=goal,
        tracks=tracks,
    )
    validate_scene(scene)
    return scene


def straight_scene(length: float = 80.0, lane_width: float = DEFAULT_LANE_WIDTH,
                   speed_limit: float = DEFAULT_SPEED_LIMIT, n_objects: int = 0,
                   seed: int = 0, duration: float | None = None) -> Scene:
    """Straight non-intersection road along +x."""
    rng = np.random.default_rng(seed)
    xy = _line((0.0, 0.0), (length, 0.0))
    duration = duration or (length / (0.7 * speed_limit) + 4.0)
    lane = LaneSegment("lane0", _poses_along(xy), lane_width, speed_limit, [])
    tracks = _populate(rng, xy, lane_width, n_objects, duration, speed_limit)
    return _assemble(f"straight-{seed:04d}", [lane], ["lane0"], xy, lane_width,
                     speed_limit, tracks, duration)


def turn_scene(direction: str = "left", leg: float = 35.0, radius: float = 18.0,
               lane_width: float = DEFAULT_LANE_WIDTH,
               speed_limit: float = DEFAULT_SPEED_LIMIT, n_objects: int = 0,
               seed: int = 0, duration: float | None = None) -> Scene:
    """90-degree left or right turn through an intersection."""
    if direction not in ("left", "right"):
        raise ValueError("direction must be 'left' or 'right'")
    rng = np.random.default_rng(seed)
    sign = 1.0 if direction == "left" else -1.0
    approach = _line((0.0, 0.0), (leg, 0.0))
    center = (leg, sign * radius)
    arc = _arc(center, radius, -sign * math.pi / 2, 0.0)
    exit_start = arc[-1]
    exit_xy = _line(exit_start, exit_start + np.array([0.0, sign * leg]))
    lanes = [
        LaneSegment("approach", _poses_along(approach), lane_width, speed_limit, ["arc"]),
        LaneSegment("arc", _poses_along(arc), lane_width, speed_limit, ["exit"]),
        LaneSegment("exit", _poses_along(exit_xy), lane_width, speed_limit, []),
    ]
    route_xy = np.vstack([approach, arc[1:], exit_xy[1:]])
    duration = duration or (float(polyline_lengths(route_xy)[-1]) / (0.6 * speed_limit) + 4.0)
    tracks = _populate(rng, route_xy, lane_width, n_objects, duration, speed_limit)
    return _assemble(f"{direction}turn-{seed:04d}", lanes, ["approach", "arc", "exit"],
                     route_xy, lane_width, speed_limit, tracks, duration,
                     road_half_width=2.0 * lane_width)


def intersection_scene(length: float = 90.0, lane_width: float = DEFAULT_LANE_WIDTH,
                       speed_limit: float = DEFAULT_SPEED_LIMIT, n_objects: int = 0,
                       seed: int = 0, duration: float | None = None,
                       light_cycle: tuple[float, float, float] = (30.0, 3.0, 30.0)) -> Scene:
    """Straight through a signalized intersection with a crossing lane."""
    rng = np.random.default_rng(seed)
    xy = _line((0.0, 0.0), (length, 0.0))
    mid = length / 2.0
    cross_xy = _line((mid, -1.5 * length / 4), (mid, 1.5 * length / 4))
    duration = duration or (length / (0.7 * speed_limit) + 4.0)
    g, y, r = light_cycle
    lanes = [
        LaneSegment("main", _poses_along(xy), lane_width, speed_limit, []),
        LaneSegment("cross", _poses_along(cross_xy), lane_width, speed_limit, []),
    ]
    lights = [
        TrafficLight("main", [(0.0, "green"), (g, "yellow"), (g + y, "red")]),
        TrafficLight("cross", [(0.0, "red"), (g + y, "green")]),
    ]
    w = 2.2 * lane_width
    crosswalks = [
        np.array([[mid - w, -w], [mid - w + 2.5, -w], [mid - w + 2.5, w], [mid - w, w]]),
        np.array([[mid + w - 2.5, -w], [mid + w, -w], [mid + w, w], [mid + w - 2.5, w]]),
    ]
    tracks = _populate(rng, xy, lane_width, n_objects, duration, speed_limit)
    return _assemble(f"intersection-{seed:04d}", lanes, ["main"], xy, lane_width,
                     speed_limit, tracks, duration, lights=lights, crosswalks=crosswalks,
                     road_half_width=2.0 * lane_width)


def blocked_lane_scene(length: float = 60.0, block_at: float = 30.0,
                       seed: int = 0) -> Scene:
    """Straight road with a vehicle parked across the lane (collision fixture)."""
    scene = straight_scene(length=length, seed=seed)
    pose = Pose(block_at, 0.0, math.pi / 2)
    block = _static_track("blocker", "vehicle", pose, scene.duration, 2.4, 1.0)
    scene = Scene(
        ads_id=f"blocked-{seed:04d}",
        duration=scene.duration,
        map=scene.map,
        route=list(scene.route),
        ego_start=scene.ego_start,
        ego_speed=scene.ego_speed,
        goal_region=scene.goal_region,
        tracks=scene.tracks + [block],
    )
    validate_scene(scene)
    return scene


TEMPLATES = {
    "straight": straight_scene,
    "left_turn": lambda **kw: turn_scene(direction="left", **kw),
    "right_turn": lambda **kw: turn_scene(direction="right", **kw),
    "intersection": intersection_scene,
    "blocked": blocked_lane_scene,
}


def make_scene(template: str, **kwargs) -> Scene:
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; have {sorted(TEMPLATES)}")
    return TEMPLATES[template](**kwargs)
