"""2D geometry primitives: poses, angles, polylines, polygons, oriented boxes.

Everything here is pure and operates on plain floats / numpy arrays, so it can
be shared freely between concurrent episode workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi


def norm_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(theta, TAU)
    if r <= -math.pi:
        r += TAU
    return r


def angle_diff(a: float, b: float) -> float:
    """Shortest signed arc from b to a, in (-pi, pi]."""
    return norm_angle(a - b)


def lerp_angle(a: float, b: float, frac: float) -> float:
    """Interpolate from a to b along the shorter arc."""
    return norm_angle(a + frac * angle_diff(b, a))


@dataclass(frozen=True)
class Pose:
    """Planar pose: position in meters, heading in radians, theta in (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", norm_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def forward(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.theta]


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle described by a center pose and half extents."""

    center: Pose
    half_length: float
    half_width: float

    def corners(self) -> np.ndarray:
        """Corner coordinates, counter-clockwise, shape (4, 2)."""
        c, s = math.cos(self.center.theta), math.sin(self.center.theta)
        fwd = np.array([c, s]) * self.half_length
        left = np.array([-s, c]) * self.half_width
        p = self.center.xy
        return np.array([p + fwd + left, p - fwd + left, p - fwd - left, p + fwd - left])


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Exact overlap test for two oriented rectangles (separating axes).

    For a pair of rectangles only four axes need to be tested: the two edge
    normals of each box. Touching boxes count as overlapping.
    """
    ca, cb = a.corners(), b.corners()
    for theta in (a.center.theta, b.center.theta):
        c, s = math.cos(theta), math.sin(theta)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def point_in_polygon(point, polygon: np.ndarray) -> bool:
    """Even-odd (ray casting) containment test.

    polygon: (n, 2) array of vertices, implicitly closed. Points exactly on an
    edge may land on either side; callers needing guarantees should buffer.
    """
    x, y = float(point[0]), float(point[1])
    poly = np.asarray(polygon, dtype=float)
    n = len(poly)
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def polygon_area(polygon: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    p = np.asarray(polygon, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polyline_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length along a polyline, shape (n,), starting at 0."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def point_at_arclength(points: np.ndarray, s: float) -> np.ndarray:
    """Point on a polyline at arc length s (clamped to the ends)."""
    return frame_at_arclength(points, s)[0]


def frame_at_arclength(points: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """(point, tangent angle) on a polyline at arc length s (clamped)."""
    pts = np.asarray(points, dtype=float)
    cum = polyline_lengths(pts)
    s = min(max(s, 0.0), float(cum[-1]))
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(pts) - 2)
    seg = cum[i + 1] - cum[i]
    frac = 0.0 if seg <= 0 else (s - cum[i]) / seg
    d = pts[i + 1] - pts[i]
    return pts[i] + frac * d, math.atan2(d[1], d[0])


def project_to_polyline(points: np.ndarray, p) -> tuple[float, float, float]:
    """Project p onto a polyline.

    Returns (arc length of the projection, distance to it, tangent angle of
    the segment it falls on).
    """
    pts = np.asarray(points, dtype=float)
    p = np.asarray(p, dtype=float)
    cum = polyline_lengths(pts)
    best = (0.0, float("inf"), 0.0)
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        d = b - a
        seg2 = float(d @ d)
        t = 0.0 if seg2 == 0 else float(np.clip((p - a) @ d / seg2, 0.0, 1.0))
        q = a + t * d
        dist = float(np.linalg.norm(p - q))
        if dist < best[1]:
            best = (float(cum[i]) + t * math.sqrt(seg2), dist, math.atan2(d[1], d[0]))
    return best


def offset_band(centerline: np.ndarray, half_width: float) -> np.ndarray:
    """Polygon covering a band of +-half_width around a polyline.

    Uses per-vertex averaged normals; adequate for gently curving roads.
    """
    pts = np.asarray(centerline, dtype=float)
    n = len(pts)
    normals = np.zeros((n, 2))
    for i in range(n):
        if i == 0:
            d = pts[1] - pts[0]
        elif i == n - 1:
            d = pts[-1] - pts[-2]
        else:
            d = pts[i + 1] - pts[i - 1]
        d = d / (np.linalg.norm(d) + 1e-12)
        normals[i] = (-d[1], d[0])
    left = pts + half_width * normals
    right = pts - half_width * normals
    return np.vstack([left, right[::-1]])
