"""Top-down observation rendering in an ego-anchored frame.

Four channels, all W x H and byte-valued, drawn with integer-pixel polylines
and scanline polygon fill (no anti-aliasing, so renders are bit-stable and
golden tests can compare raw buffers):

  roadmap   RGB: drivable area, lane centerlines colored by light state,
            crosswalk/goal outlines, stop signs
  routing   gray: route lanes only, intensity proportional to speed limit
  past      gray: trail of recent ego poses, fading with age
  dynamic   k gray frames: object boxes at t, t-dt, ..., all in the frame of
            the current ego pose

The ego sits at a fixed pixel (u0, v0) with its heading pointing up.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .scene import Scene, object_box_at

ROAD_FILL = (60, 60, 60)
LANE_UNCONTROLLED = (255, 255, 255)
LIGHT_COLORS = {"red": (230, 40, 40), "yellow": (230, 200, 40), "green": (40, 200, 60)}
CROSSWALK_COLOR = (200, 200, 200)
GOAL_COLOR = (180, 180, 255)
STOP_SIGN_COLOR = (255, 128, 0)
ROUTING_SPEED_CAP = 20.0
PAST_FADE_MIN = 64


@dataclass(frozen=True)
class RasterConfig:
    width: int = 128
    height: int = 128
    meters_per_pixel: float = 0.5
    u0: int = 64
    v0: int = 96
    n_past_frames: int = 4
    frame_interval: float = 0.2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.meters_per_pixel <= 0:
            raise ValueError("raster dimensions must be positive")
        if not (0 <= self.u0 < self.width and 0 <= self.v0 < self.height):
            raise ValueError("ego anchor must lie inside the image")
        if self.n_past_frames < 1:
            raise ValueError("need at least one past frame")


@dataclass
class ObservationStack:
    roadmap: np.ndarray  # (H, W, 3) uint8
    routing: np.ndarray  # (H, W) uint8
    past_poses: np.ndarray  # (H, W) uint8
    dynamic_objects: list[np.ndarray]  # k x (H, W) uint8
    ego_speed: float

    def channels(self) -> np.ndarray:
        """Stack as (3 + 1 + 1 + k, H, W) uint8 for network input."""
        chans = [self.roadmap[:, :, i] for i in range(3)]
        chans += [self.routing, self.past_poses]
        chans += list(self.dynamic_objects)
        return np.stack(chans)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.channels().tobytes())
        h.update(np.float64(self.ego_speed).tobytes())
        return h.hexdigest()


def world_to_image(cfg: RasterConfig, ego_pose: Pose, p) -> tuple[float, float]:
    """World point -> fractional pixel coordinates, ego at (u0, v0) heading up."""
    dx = float(p[0]) - ego_pose.x
    dy = float(p[1]) - ego_pose.y
    c, s = math.cos(ego_pose.theta), math.sin(ego_pose.theta)
    fwd = c * dx + s * dy
    left = -s * dx + c * dy
    u = cfg.u0 - left / cfg.meters_per_pixel
    v = cfg.v0 - fwd / cfg.meters_per_pixel
    return u, v


def image_to_world(cfg: RasterConfig, ego_pose: Pose, uv) -> tuple[float, float]:
    fwd = (cfg.v0 - float(uv[1])) * cfg.meters_per_pixel
    left = (cfg.u0 - float(uv[0])) * cfg.meters_per_pixel
    c, s = math.cos(ego_pose.theta), math.sin(ego_pose.theta)
    return ego_pose.x + c * fwd - s * left, ego_pose.y + s * fwd + c * left


def _to_px(cfg: RasterConfig, ego_pose: Pose, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    d = pts - np.array([ego_pose.x, ego_pose.y])
    c, s = math.cos(ego_pose.theta), math.sin(ego_pose.theta)
    fwd = d @ np.array([c, s])
    left = d @ np.array([-s, c])
    return np.column_stack(
        [cfg.u0 - left / cfg.meters_per_pixel, cfg.v0 - fwd / cfg.meters_per_pixel]
    )


def draw_polyline(img: np.ndarray, pts_px: np.ndarray, value) -> None:
    """1-pixel Bresenham polyline on rounded endpoints."""
    h, w = img.shape[:2]

    def put(u, v):
        if 0 <= u < w and 0 <= v < h:
            img[v, u] = value

    for i in range(len(pts_px) - 1):
        u0, v0 = int(round(pts_px[i, 0])), int(round(pts_px[i, 1]))
        u1, v1 = int(round(pts_px[i + 1, 0])), int(round(pts_px[i + 1, 1]))
        du, dv = abs(u1 - u0), -abs(v1 - v0)
        su = 1 if u0 < u1 else -1
        sv = 1 if v0 < v1 else -1
        err = du + dv
        while True:
            put(u0, v0)
            if u0 == u1 and v0 == v1:
                break
            e2 = 2 * err
            if e2 >= dv:
                err += dv
                u0 += su
            if e2 <= du:
                err += du
                v0 += sv
    if len(pts_px) == 1:
        put(int(round(pts_px[0, 0])), int(round(pts_px[0, 1])))


def fill_polygon(img: np.ndarray, pts_px: np.ndarray, value) -> None:
    """Even-odd scanline fill over integer pixel centers."""
    h, w = img.shape[:2]
    ys = pts_px[:, 1]
    v_min = max(0, int(math.ceil(ys.min())))
    v_max = min(h - 1, int(math.floor(ys.max())))
    if v_max < v_min:
        return
    x0 = pts_px[:, 0]
    y0 = pts_px[:, 1]
    x1 = np.roll(x0, -1)
    y1 = np.roll(y0, -1)
    rows = np.arange(v_min, v_max + 1, dtype=float)
    crosses = (y0[None, :] > rows[:, None]) != (y1[None, :] > rows[:, None])
    dy = np.where(y1 == y0, 1.0, y1 - y0)
    for vi, v in enumerate(range(v_min, v_max + 1)):
        e = crosses[vi]
        if not e.any():
            continue
        xs = np.sort(x0[e] + (v - y0[e]) * (x1[e] - x0[e]) / dy[e])
        for j in range(0, len(xs) - 1, 2):
            u_lo = max(0, int(math.ceil(xs[j])))
            u_hi = min(w - 1, int(math.floor(xs[j + 1])))
            if u_hi >= u_lo:
                img[v, u_lo : u_hi + 1] = value


def render_roadmap(scene: Scene, ego_pose: Pose, t: float, cfg: RasterConfig) -> np.ndarray:
    img = np.zeros((cfg.height, cfg.width, 3), dtype=np.uint8)
    fill_polygon(img, _to_px(cfg, ego_pose, scene.map.road_boundary), ROAD_FILL)
    for cw in scene.map.crosswalks:
        poly = np.vstack([cw, cw[:1]])
        draw_polyline(img, _to_px(cfg, ego_pose, poly), CROSSWALK_COLOR)
    for lane in scene.map.lanes:
        light = scene.map.light_for(lane.lane_id)
        color = LANE_UNCONTROLLED if light is None else LIGHT_COLORS[light.state_at(t)]
        draw_polyline(img, _to_px(cfg, ego_pose, lane.centerline_xy()), color)
    goal = np.vstack([scene.goal_region, scene.goal_region[:1]])
    draw_polyline(img, _to_px(cfg, ego_pose, goal), GOAL_COLOR)
    for sign in scene.map.stop_signs:
        u, v = world_to_image(cfg, ego_pose, (sign.x, sign.y))
        draw_polyline(img, np.array([[u, v]]), STOP_SIGN_COLOR)
    return img


def render_routing(scene: Scene, ego_pose: Pose, cfg: RasterConfig) -> np.ndarray:
    img = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    for lane_id in scene.route:
        lane = scene.map.lane(lane_id)
        intensity = int(round(255.0 * min(lane.speed_limit, ROUTING_SPEED_CAP) / ROUTING_SPEED_CAP))
        draw_polyline(img, _to_px(cfg, ego_pose, lane.centerline_xy()), intensity)
    return img


def render_past_poses(history: list[Pose], ego_pose: Pose, cfg: RasterConfig) -> np.ndarray:
    """Trail of points, most recent last and brightest (255 down to 64)."""
    img = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    n = len(history)
    for i, pose in enumerate(history):
        if n == 1:
            intensity = 255
        else:
            age = (n - 1 - i) / (n - 1)
            intensity = int(round(255 + age * (PAST_FADE_MIN - 255)))
        u, v = world_to_image(cfg, ego_pose, (pose.x, pose.y))
        ui, vi = int(round(u)), int(round(v))
        if 0 <= ui < cfg.width and 0 <= vi < cfg.height:
            img[vi, ui] = max(img[vi, ui], intensity)
    return img


def render_dynamic_objects(scene: Scene, ego_pose: Pose, t: float,
                           cfg: RasterConfig) -> list[np.ndarray]:
    """Frame j shows all object boxes at t - j * frame_interval."""
    frames = []
    for j in range(cfg.n_past_frames):
        img = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
        tj = t - j * cfg.frame_interval
        for tr in scene.tracks:
            box = object_box_at(scene, tr.object_id, tj) if tj >= 0 else None
            if box is None:
                continue
            fill_polygon(img, _to_px(cfg, ego_pose, box.corners()), 255)
        frames.append(img)
    return frames


def render_observation(scene: Scene, ego_pose: Pose, t: float, speed: float,
                       history: list[Pose], cfg: RasterConfig) -> ObservationStack:
    return ObservationStack(
        roadmap=render_roadmap(scene, ego_pose, t, cfg),
        routing=render_routing(scene, ego_pose, cfg),
        past_poses=render_past_poses(history[-cfg.n_past_frames:], ego_pose, cfg),
        dynamic_objects=render_dynamic_objects(scene, ego_pose, t, cfg),
        ego_speed=float(speed),
    )


def save_channels_png(obs: ObservationStack, out_dir, prefix: str = "obs") -> list[str]:
    """Write each channel as a PNG for inspection; returns written paths."""
    from pathlib import Path

    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def write(name, arr, mode):
        p = out / f"{prefix}_{name}.png"
        Image.fromarray(arr, mode=mode).save(p)
        paths.append(str(p))

    write("roadmap", obs.roadmap, "RGB")
    write("routing", obs.routing, "L")
    write("past", obs.past_poses, "L")
    for j, frame in enumerate(obs.dynamic_objects):
        write(f"dynamic{j}", frame, "L")
    return paths
