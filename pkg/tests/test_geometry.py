import math

import numpy as np
import pytest

from deskdrive.geometry import (
    OrientedBox,
    Pose,
    angle_diff,
    boxes_overlap,
    frame_at_arclength,
    lerp_angle,
    norm_angle,
    offset_band,
    point_at_arclength,
    point_in_polygon,
    polygon_area,
    project_to_polyline,
)


def test_norm_angle_range():
    rng = np.random.default_rng(0)
    for a in rng.uniform(-50, 50, size=500):
        r = norm_angle(a)
        assert -math.pi < r <= math.pi
        assert math.isclose(math.sin(r), math.sin(a), abs_tol=1e-12)
        assert math.isclose(math.cos(r), math.cos(a), abs_tol=1e-12)


def test_norm_angle_boundary():
    assert norm_angle(math.pi) == math.pi
    assert norm_angle(-math.pi) == math.pi
    assert norm_angle(3 * math.pi) == pytest.approx(math.pi)


def test_lerp_angle_shorter_arc():
    # +3.0 to -3.0 should cross +-pi, not zero
    mid = lerp_angle(3.0, -3.0, 0.5)
    assert abs(mid) > 3.0


def test_angle_diff_sign():
    assert angle_diff(0.1, -0.1) == pytest.approx(0.2)
    assert angle_diff(-3.0, 3.0) == pytest.approx(2 * math.pi - 6.0)


def test_pose_normalizes_theta():
    p = Pose(0.0, 0.0, 4.0)
    assert -math.pi < p.theta <= math.pi


def test_oriented_box_corners():
    box = OrientedBox(Pose(1.0, 2.0, 0.0), 2.0, 1.0)
    corners = box.corners()
    assert corners.shape == (4, 2)
    assert np.allclose(corners.mean(axis=0), [1.0, 2.0])
    assert np.allclose(sorted(corners[:, 0]), [-1, -1, 3, 3])


def test_boxes_overlap_axis_aligned():
    a = OrientedBox(Pose(0, 0, 0), 1.0, 1.0)
    b = OrientedBox(Pose(1.5, 0, 0), 1.0, 1.0)
    c = OrientedBox(Pose(3.5, 0, 0), 1.0, 1.0)
    assert boxes_overlap(a, b)
    assert not boxes_overlap(a, c)


def test_boxes_overlap_rotated_gap():
    # diamond just fits in the diagonal gap between two boxes
    a = OrientedBox(Pose(0, 0, 0), 1.0, 1.0)
    d = OrientedBox(Pose(2.4, 0, math.pi / 4), 0.9, 0.9)
    assert not boxes_overlap(a, d)
    d2 = OrientedBox(Pose(2.0, 0, math.pi / 4), 0.9, 0.9)
    assert boxes_overlap(a, d2)


def _sample_overlap(a: OrientedBox, b: OrientedBox, n: int = 40) -> bool:
    """Brute-force oracle: do any sampled interior points of a fall inside b?"""

    def inside(box, pts):
        d = pts - box.center.xy
        c, s = math.cos(box.center.theta), math.sin(box.center.theta)
        fwd = d @ np.array([c, s])
        lat = d @ np.array([-s, c])
        return (np.abs(fwd) <= box.half_length) & (np.abs(lat) <= box.half_width)

    for src, dst in ((a, b), (b, a)):
        fs = np.linspace(-1, 1, n)
        grid = np.stack(np.meshgrid(fs, fs), axis=-1).reshape(-1, 2)
        c, s = math.cos(src.center.theta), math.sin(src.center.theta)
        rot = np.array([[c, -s], [s, c]])
        pts = src.center.xy + (grid * [src.half_length, src.half_width]) @ rot.T
        if inside(dst, pts).any():
            return True
    return False


def test_sat_matches_sampling_oracle():
    rng = np.random.default_rng(42)
    disagreements = 0
    for _ in range(500):
        a = OrientedBox(
            Pose(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-math.pi, math.pi)),
            rng.uniform(0.3, 2.0),
            rng.uniform(0.3, 2.0),
        )
        b = OrientedBox(
            Pose(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-math.pi, math.pi)),
            rng.uniform(0.3, 2.0),
            rng.uniform(0.3, 2.0),
        )
        sat = boxes_overlap(a, b)
        sampled = _sample_overlap(a, b)
        if sampled and not sat:
            disagreements += 1  # SAT may never miss a sampled overlap
    assert disagreements == 0


def test_point_in_polygon_square():
    square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]])
    assert point_in_polygon((1, 1), square)
    assert not point_in_polygon((3, 1), square)
    assert not point_in_polygon((-0.01, 1), square)


def test_polygon_area_ccw():
    square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]])
    assert polygon_area(square) == pytest.approx(4.0)
    assert polygon_area(square[::-1]) == pytest.approx(-4.0)


def test_arclength_walk():
    line = np.array([[0, 0], [3, 0], [3, 4]])
    assert np.allclose(point_at_arclength(line, 0.0), [0, 0])
    assert np.allclose(point_at_arclength(line, 3.0), [3, 0])
    assert np.allclose(point_at_arclength(line, 5.0), [3, 2])
    assert np.allclose(point_at_arclength(line, 99.0), [3, 4])
    p, th = frame_at_arclength(line, 5.0)
    assert th == pytest.approx(math.pi / 2)


def test_project_to_polyline():
    line = np.array([[0, 0], [10, 0]])
    s, dist, tang = project_to_polyline(line, (3.0, 2.0))
    assert s == pytest.approx(3.0)
    assert dist == pytest.approx(2.0)
    assert tang == pytest.approx(0.0)


def test_offset_band_contains_centerline():
    line = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 5.0]])
    band = offset_band(line, 2.0)
    for s in np.linspace(0.5, 20.5, 20):  # interior points; ends lie on the edge
        assert point_in_polygon(point_at_arclength(line, s), band)
