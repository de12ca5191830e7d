import json
import math
import os

import numpy as np
import pytest

from deskdrive.errors import FuzzFailed, NotAFailure, ParseError, UnknownObject, ValidationError, IoError
from deskdrive.geometry import OrientedBox, Pose, boxes_overlap, point_in_polygon
from deskdrive.scene import (
    EGO_HALF_LENGTH,
    EGO_HALF_WIDTH,
    FuzzConfig,
    ObjectTrack,
    Scene,
    exploring_tree_seeds,
    load_scene,
    object_box_at,
    routine_fuzz,
    save_scene,
    scene_to_json,
    scenes_equal,
    validate_scene,
)
from deskdrive.templates import make_scene, straight_scene, turn_scene


class TestFileFormat:
    def test_round_trip_straight(self, straight_fixture, tmp_path):
        p = tmp_path / "scene.json"
        save_scene(straight_fixture, p)
        loaded = load_scene(p)
        assert scenes_equal(straight_fixture, loaded)

    def test_round_trip_all_templates(self, tmp_path):
        for i, tpl in enumerate(["straight", "left_turn", "right_turn", "intersection", "blocked"]):
            kwargs = {"seed": i}
            if tpl != "blocked":
                kwargs["n_objects"] = 2
            scene = make_scene(tpl, **kwargs)
            p = tmp_path / f"{tpl}.json"
            save_scene(scene, p)
            assert scenes_equal(scene, load_scene(p))

    def test_round_trip_fuzzed(self, objects_fixture, tmp_path):
        fuzzed = routine_fuzz(objects_fixture, FuzzConfig(1.0, 0.05, 0.5, "both", seed=9))
        p = tmp_path / "fz.json"
        save_scene(fuzzed, p)
        assert scenes_equal(fuzzed, load_scene(p))

    def test_canonical_bytes(self, straight_fixture, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_scene(straight_fixture, p1)
        save_scene(straight_fixture, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_route_lane(self, straight_fixture, tmp_path):
        d = json.loads(scene_to_json(straight_fixture))
        d["route"] = ["nope"]
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(d))
        with pytest.raises(ValidationError, match="route lane not in map"):
            load_scene(p)

    def test_parse_error_carries_location(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text('{"ads_id": "x", \n  "duration_s": }')
        with pytest.raises(ParseError, match=r":2:"):
            load_scene(p)

    def test_missing_field(self, straight_fixture, tmp_path):
        d = json.loads(scene_to_json(straight_fixture))
        del d["goal_region"]
        p = tmp_path / "missing.json"
        p.write_text(json.dumps(d))
        with pytest.raises(ParseError, match="goal_region"):
            load_scene(p)

    def test_unwritable_path(self, straight_fixture):
        with pytest.raises(IoError):
            save_scene(straight_fixture, "/nonexistent-dir/sub/scene.json")


class TestValidation:
    def test_ego_outside_boundary(self, straight_fixture):
        bad = Scene(
            ads_id="bad",
            duration=straight_fixture.duration,
            map=straight_fixture.map,
            route=list(straight_fixture.route),
            ego_start=Pose(-500.0, -500.0, 0.0),
            ego_speed=1.0,
            goal_region=straight_fixture.goal_region,
            tracks=[],
        )
        with pytest.raises(ValidationError, match="ego start"):
            validate_scene(bad)

    def test_track_sample_ordering(self, straight_fixture):
        bad_track = ObjectTrack("o", "vehicle", 1.0, 0.5,
                                [(1.0, Pose(5, 0, 0)), (0.5, Pose(6, 0, 0))])
        bad = Scene(
            ads_id="bad",
            duration=straight_fixture.duration,
            map=straight_fixture.map,
            route=list(straight_fixture.route),
            ego_start=straight_fixture.ego_start,
            ego_speed=straight_fixture.ego_speed,
            goal_region=straight_fixture.goal_region,
            tracks=[bad_track],
        )
        with pytest.raises(ValidationError, match="strictly increasing"):
            validate_scene(bad)

    def test_short_duration(self, straight_fixture):
        bad = Scene(
            ads_id="bad",
            duration=1.0,
            map=straight_fixture.map,
            route=list(straight_fixture.route),
            ego_start=straight_fixture.ego_start,
            ego_speed=straight_fixture.ego_speed,
            goal_region=straight_fixture.goal_region,
            tracks=[],
        )
        with pytest.raises(ValidationError, match="duration"):
            validate_scene(bad)


class TestInterpolation:
    def _scene_with_track(self, base, samples):
        track = ObjectTrack("obj", "vehicle", 1.0, 0.5, samples)
        return Scene(
            ads_id="interp",
            duration=base.duration,
            map=base.map,
            route=list(base.route),
            ego_start=base.ego_start,
            ego_speed=base.ego_speed,
            goal_region=base.goal_region,
            tracks=[track],
        )

    def test_midpoint(self, straight_fixture):
        sc = self._scene_with_track(
            straight_fixture, [(0.0, Pose(0, 0, 0)), (1.0, Pose(10, 0, 0))]
        )
        box = object_box_at(sc, "obj", 0.5)
        assert box.center.x == pytest.approx(5.0)

    def test_outside_span_absent(self, straight_fixture):
        sc = self._scene_with_track(
            straight_fixture, [(1.0, Pose(0, 0, 0)), (2.0, Pose(10, 0, 0))]
        )
        assert object_box_at(sc, "obj", 0.5) is None
        assert object_box_at(sc, "obj", 2.5) is None

    def test_exact_sample_times(self, straight_fixture):
        samples = [(0.0, Pose(0, 0, 0.2)), (1.0, Pose(10, 1, -0.4)), (2.0, Pose(20, 0, 0.1))]
        sc = self._scene_with_track(straight_fixture, samples)
        for t, pose in samples:
            box = object_box_at(sc, "obj", t)
            assert box.center.x == pose.x
            assert box.center.y == pose.y
            assert box.center.theta == pose.theta

    def test_shorter_arc_heading(self, straight_fixture):
        sc = self._scene_with_track(
            straight_fixture, [(0.0, Pose(0, 0, 3.0)), (1.0, Pose(10, 0, -3.0))]
        )
        box = object_box_at(sc, "obj", 0.5)
        # the short way from +3.0 to -3.0 passes through pi, not 0
        assert abs(box.center.theta) > 3.0

    def test_unknown_object(self, straight_fixture):
        with pytest.raises(UnknownObject):
            object_box_at(straight_fixture, "ghost", 0.0)


class TestRoutineFuzz:
    def test_zero_jitter_identity_except_id(self, objects_fixture):
        out = routine_fuzz(objects_fixture, FuzzConfig(0.0, 0.0, 0.0, "both", seed=3))
        assert out.ads_id == objects_fixture.ads_id + "#fuzz3"
        assert out.ego_start == objects_fixture.ego_start
        assert out.ego_speed == objects_fixture.ego_speed
        for a, b in zip(out.tracks, objects_fixture.tracks):
            assert a.samples == b.samples

    def test_determinism(self, objects_fixture):
        cfg = FuzzConfig(1.5, 0.1, 0.5, "both", seed=11)
        a = routine_fuzz(objects_fixture, cfg)
        b = routine_fuzz(objects_fixture, cfg)
        assert scenes_equal(a, b)

    def test_many_seeds_stay_valid(self, objects_fixture):
        cfg0 = FuzzConfig(2.0, 0.1, 1.0, "both", seed=0)
        produced = 0
        for seed in range(200):
            cfg = FuzzConfig(2.0, 0.1, 1.0, "both", seed=seed)
            try:
                out = routine_fuzz(objects_fixture, cfg)
            except FuzzFailed:
                continue
            produced += 1
            validate_scene(out)
            ego_box = OrientedBox(out.ego_start, EGO_HALF_LENGTH, EGO_HALF_WIDTH)
            assert all(
                point_in_polygon(c, out.map.road_boundary) for c in ego_box.corners()
            )
            boxes = [ego_box]
            for tr in out.tracks:
                b = object_box_at(out, tr.object_id, 0.0)
                if b is None:
                    continue
                assert not any(boxes_overlap(b, other) for other in boxes)
                boxes.append(b)
        assert produced >= 190

    def test_ego_only_leaves_objects(self, objects_fixture):
        out = routine_fuzz(objects_fixture, FuzzConfig(1.0, 0.0, 0.0, "ego_only", seed=5))
        for a, b in zip(out.tracks, objects_fixture.tracks):
            assert a.samples == b.samples

    def test_rigid_track_offset_preserves_shape(self, objects_fixture):
        out = routine_fuzz(objects_fixture, FuzzConfig(2.0, 0.3, 0.0, "objects_only", seed=7))
        for a, b in zip(out.tracks, objects_fixture.tracks):
            da = np.diff([[p.x, p.y] for _, p in a.samples], axis=0)
            db = np.diff([[p.x, p.y] for _, p in b.samples], axis=0)
            assert np.allclose(np.linalg.norm(da, axis=1), np.linalg.norm(db, axis=1))

    def test_impossible_placement_raises(self, straight_fixture):
        # shrink the world by demanding two-kilometer jumps
        with pytest.raises(FuzzFailed):
            routine_fuzz(
                straight_fixture,
                FuzzConfig(2000.0, 0.0, 0.0, "ego_only", seed=1),
            )


class TestExploringTree:
    def _failed_log(self, straight_fixture, episode_cfg):
        from deskdrive.simkernel import StraightPolicy, run_episode
        from deskdrive.templates import blocked_lane_scene

        scene = blocked_lane_scene()
        return run_episode(scene, StraightPolicy(), episode_cfg, seed=4)

    def test_branch_times_uniform(self):
        class FakeLog:
            status = "collision"
            seed = 1

        log = FakeLog()
        log.steps = [type("S", (), {"t": t})() for t in (3.8, 4.0)]
        seeds = exploring_tree_seeds(log, 4, 2.0)
        assert [s.branch_time for s in seeds] == pytest.approx([2.0, 2.5, 3.0, 3.5])

    def test_goal_log_rejected(self, straight_fixture, episode_cfg):
        from deskdrive.simkernel import StraightPolicy, run_episode

        log = run_episode(straight_fixture, StraightPolicy(), episode_cfg, seed=1)
        assert log.status == "goal"
        with pytest.raises(NotAFailure):
            exploring_tree_seeds(log, 4, 2.0)

    def test_replay_prefix_bit_equality(self, episode_cfg):
        from deskdrive.action import ExplorationConfig
        from deskdrive.simkernel import StraightPolicy, run_episode
        from deskdrive.templates import blocked_lane_scene

        scene = blocked_lane_scene()
        source = run_episode(scene, StraightPolicy(), episode_cfg,
                             explore=ExplorationConfig(), seed=21)
        assert source.status == "collision"
        for rs in exploring_tree_seeds(source, 3, 1.5):
            replay = run_episode(
                scene, StraightPolicy(), episode_cfg,
                explore=ExplorationConfig(), seed=rs.explore_seed,
                replay_actions=source.actions(), branch_time=rs.branch_time,
            )
            n_prefix = sum(1 for s in source.steps if s.t < rs.branch_time - 1e-9)
            for i in range(n_prefix):
                a, b = source.steps[i], replay.steps[i]
                assert np.array_equal(a.action.steps, b.action.steps)
                assert a.state == b.state
                assert a.reward == b.reward

    def test_distinct_explore_seeds(self):
        class FakeLog:
            status = "off_road"
            seed = 9

        log = FakeLog()
        log.steps = [type("S", (), {"t": 5.0})()]
        seeds = exploring_tree_seeds(log, 8, 3.0)
        assert len({s.explore_seed for s in seeds}) == 8
