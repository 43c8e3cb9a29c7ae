import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cfnav import gridworld as gw
from cfnav.gridworld import Action, AgentPose


def scene_from(rows, classes=("Mug",), sid="hand"):
    return gw.GridScene(sid, tuple(rows), tuple(classes))


OPEN = scene_from([
    "############",
    "#..........#",
    "#..........#",
    "#..........#",
    "#..........#",
    "#....A.....#",
    "#..........#",
    "#..........#",
    "#..........#",
    "#..........#",
    "#..........#",
    "############",
])


# --------------------------------------------------------------------------
# generation and files

def test_generate_seed7_passes_audit():
    scene = gw.generate_scene(7, gw.SceneGenParams(12, 12, 0.2, 3))
    assert gw.audit_scene(scene) == []
    assert (scene.width, scene.height, scene.n_classes) == (12, 12, 3)


def test_generate_is_deterministic():
    p = gw.SceneGenParams(12, 12, 0.2, 3)
    a, b = gw.generate_scene(7, p), gw.generate_scene(7, p)
    assert gw.format_scene(a) == gw.format_scene(b)


@pytest.mark.parametrize("seed", [0, 3, 11])
def test_zero_density_interior(seed):
    scene = gw.generate_scene(seed, gw.SceneGenParams(8, 8, 0.0, 1))
    interior = "".join(r[1:-1] for r in scene.rows[1:-1])
    assert interior.count("A") == 1
    assert set(interior) == {".", "A"}


@pytest.mark.parametrize("params", [
    gw.SceneGenParams(8, 8, 0.9, 1),
    gw.SceneGenParams(7, 12, 0.1, 1),
    gw.SceneGenParams(12, 12, 0.2, 0),
])
def test_unsatisfiable_params(params):
    with pytest.raises(gw.SceneGenError, match="unsatisfiable scene params"):
        gw.generate_scene(1, params)


@pytest.mark.parametrize("seed", range(8))
def test_generated_invariants(seed):
    scene = gw.generate_scene(seed, gw.SceneGenParams(targets_per_class=2))
    h, w = scene.height, scene.width
    assert all(scene.rows[0][x] == "#" == scene.rows[h - 1][x] for x in range(w))
    assert all(scene.rows[y][0] == "#" == scene.rows[y][w - 1] for y in range(h))
    for g in range(scene.n_classes):
        assert oracles.visibility_cells(scene, g), "every class must be visible from somewhere"


def test_scene_roundtrip(tmp_path):
    scene = gw.generate_scene(5)
    path = tmp_path / "s.cfs"
    gw.save_scene(scene, path)
    text = path.read_text()
    assert text.splitlines()[0] == "cfnav-scene v1 12 12 0.25"
    loaded = gw.load_scene(path)
    assert loaded.rows == scene.rows and loaded.target_classes == scene.target_classes
    gw.save_scene(loaded, tmp_path / "t.cfs")
    assert (tmp_path / "t.cfs").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("text,msg", [
    ("", "empty"),
    ("cfnav-scene v2 3 3 0.25\n###\n#.#\n###\ntargets: A\n", "expected"),
    ("cfnav-scene v1 3 3 0.25\n###\n#.#\ntargets: A\n", "grid rows"),
    ("cfnav-scene v1 3 3 0.25\n###\n#?#\n###\ntargets: A\n", "invalid cell"),
    ("cfnav-scene v1 3 3 0.25\n###\n#.##\n###\ntargets: A\n", ":3: row length"),
])
def test_parse_errors(text, msg):
    with pytest.raises(gw.SceneFormatError, match=msg):
        gw.parse_scene(text, source="x.cfs")


def test_missing_scene_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.cfs"):
        gw.load_scene(tmp_path / "nope.cfs")


# --------------------------------------------------------------------------
# step

def test_blocked_move_collides():
    scene = scene_from(["#####", "#..##", "#####"])
    pose = AgentPose(2, 1, 0)
    out = gw.step(scene, pose, Action.MOVE_AHEAD)
    assert out.collided and not out.action_failed and out.new_pose == pose


def test_rotate_left_is_counterclockwise():
    out = gw.step(OPEN, AgentPose(3, 3, 0), Action.ROTATE_LEFT)
    assert out.new_pose.heading == 45 and not out.collided
    assert gw.step(OPEN, AgentPose(3, 3, 0), Action.ROTATE_RIGHT).new_pose.heading == 315


def test_pitch_clamp_is_failure_not_collision():
    out = gw.step(OPEN, AgentPose(3, 3, 0, 30), Action.LOOK_UP)
    assert out.new_pose.pitch == 30 and out.action_failed and not out.collided
    out = gw.step(OPEN, AgentPose(3, 3, 0, -30), Action.LOOK_DOWN)
    assert out.action_failed and out.new_pose.pitch == -30
    assert gw.step(OPEN, AgentPose(3, 3, 0, 0), Action.LOOK_DOWN).new_pose.pitch == -30


def test_diagonal_move_and_length():
    out = gw.step(OPEN, AgentPose(3, 3, 45), Action.MOVE_AHEAD)
    assert (out.new_pose.x, out.new_pose.y) == (4, 4)
    assert OPEN.move_length(45) == pytest.approx(0.25 * math.sqrt(2))
    assert OPEN.move_length(90) == 0.25


def test_done_never_moves():
    pose = AgentPose(3, 3, 90, 30)
    out = gw.step(OPEN, pose, Action.DONE)
    assert out.new_pose == pose and not out.collided and not out.action_failed


def test_invalid_pose_rejected():
    with pytest.raises(ValueError):
        AgentPose(1, 1, 30)
    with pytest.raises(ValueError):
        AgentPose(1, 1, 0, 60)


def _all_poses(scene):
    for x, y in scene.free_cells():
        for h in gw.HEADINGS:
            for p in gw.PITCHES:
                yield AgentPose(x, y, h, p)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_collision_oracle(seed):
    scene = gw.generate_scene(seed)
    mismatches = 0
    for pose in _all_poses(scene):
        for a in Action:
            out = gw.step(scene, pose, a)
            expect = a is Action.MOVE_AHEAD and not oracles.ahead_cell_free(scene, pose)
            mismatches += out.collided != expect
            assert not (out.collided and out.action_failed)
            if out.collided:
                assert out.new_pose == pose
    assert mismatches == 0


# --------------------------------------------------------------------------
# visibility

def test_visible_straight_ahead():
    assert gw.is_visible(OPEN, AgentPose(1, 5, 0), 0)  # 4 cells = 1.0 m


def test_not_visible_at_two_metres():
    scene = scene_from(["############", "#A.........#", "############"])
    assert not gw.is_visible(scene, AgentPose(9, 1, 180), 0)  # 8 cells = 2.0 m
    assert gw.is_visible(scene, AgentPose(7, 1, 180), 0)  # 6 cells = 1.5 m, inclusive


def test_not_visible_behind():
    assert not gw.is_visible(OPEN, AgentPose(9, 5, 0), 0)
    assert gw.is_visible(OPEN, AgentPose(9, 5, 180), 0)


def test_fov_edge_inclusive():
    assert gw.is_visible(OPEN, AgentPose(2, 2, 0), 0)  # exactly 45 degrees off heading
    assert not gw.is_visible(OPEN, AgentPose(2, 2, 315), 0)


def test_occlusion_and_transparent_targets():
    blocked = scene_from(["#######", "#..#.A#", "#######"])
    assert not gw.is_visible(blocked, AgentPose(1, 1, 0), 0)
    through = scene_from(["#######", "#..B.A#", "#######"], classes=("Mug", "Cup"))
    assert gw.is_visible(through, AgentPose(1, 1, 0), 0)


def test_corner_touch_blocks():
    # the segment from (1,1) to (3,3) passes the corner shared by (1,2) and (2,1)
    scene = scene_from(["#####", "#.#.#", "#...#", "#..A#", "#####"])
    assert not gw.is_visible(scene, AgentPose(1, 1, 45), 0)


def test_unknown_goal_raises():
    with pytest.raises(ValueError, match="unknown goal"):
        gw.is_visible(OPEN, AgentPose(1, 1, 0), 3)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_visibility_oracle(seed):
    scene = gw.generate_scene(seed)
    mismatches = 0
    for x, y in scene.free_cells():
        for h in gw.HEADINGS:
            pose = AgentPose(x, y, h)
            for g in range(scene.n_classes):
                mismatches += gw.is_visible(scene, pose, g) != oracles.visible(scene, pose, g)
    assert mismatches == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(-7, 7), st.integers(-7, 7))
def test_supercover_matches_square_oracle(dx, dy):
    x0, y0 = 8, 8
    cells = set(gw.supercover_line(x0, y0, x0 + dx, y0 + dy))
    box = [(x, y) for x in range(x0 - 8, x0 + 9) for y in range(y0 - 8, y0 + 9)]
    expect = {c for c in box if oracles._segment_touches_square((x0, y0), (x0 + dx, y0 + dy), *c)}
    assert cells == expect


# --------------------------------------------------------------------------
# shortest paths

def test_visible_start_has_zero_length():
    assert gw.shortest_path_length(OPEN, AgentPose(1, 5, 180), 0) == 0.0


def test_corridor_three_cells():
    scene = scene_from(["####################", "#A.................#", "####################"])
    assert gw.shortest_path_length(scene, AgentPose(10, 1, 0), 0) == pytest.approx(0.75, abs=1e-12)


def test_diagonal_route():
    # only diagonal moves lead from (1,1) to (3,3), the sole cell seeing the target
    scene = scene_from([
        "##########",
        "#.########",
        "##.#######",
        "###.....A#",
        "##########",
    ])
    assert not oracles.visibility_cells(scene, 0) & {(1, 1), (2, 2)}
    assert gw.shortest_path_length(scene, AgentPose(1, 1, 45), 0) == pytest.approx(0.7071, abs=1e-4)
    assert gw.shortest_path_length(scene, AgentPose(1, 1, 45), 0) == 2 * 0.25 * math.sqrt(2)


def test_unreachable_target():
    scene = scene_from(["##########", "#..#....A#", "##########"])
    with pytest.raises(gw.UnreachableTargetError, match="unreachable target"):
        gw.shortest_path_length(scene, AgentPose(1, 1, 0), 0)


@pytest.mark.parametrize("seed", range(5))
def test_shortest_path_bfs_oracle(seed):
    scene = gw.generate_scene(seed)
    for g in range(scene.n_classes):
        ref = oracles.shortest_lengths(scene, g)
        for x, y in scene.free_cells():
            got = gw.shortest_path_length(scene, AgentPose(x, y, 0), g)
            assert got == ref[(x, y)]


# --------------------------------------------------------------------------
# observations

def test_open_corridor_saturates():
    rows = ["#" * 14, "#" + "." * 12 + "#", "#" * 14]
    scene = scene_from(rows[:1] + [rows[1].replace(".", "A", 1)] + rows[2:])
    dist, slots = gw.cast_rays(scene, AgentPose(2, 1, 0))
    mid = gw.N_RAYS // 2
    assert dist[mid] == 1.0 and slots[mid] == gw.SLOT_NONE


def test_obstacle_one_cell_ahead():
    scene = scene_from(["######", "#.#.A#", "######"])
    obs = gw.observe(scene, AgentPose(1, 1, 0), Action.DONE, 0, None)
    mid = gw.N_RAYS // 2
    assert obs.distances[mid] == pytest.approx(0.125)
    assert obs.hit_slots[mid] == gw.SLOT_OBSTACLE


def test_target_hit_slot():
    scene = scene_from(["######", "#..A.#", "######"])
    obs = gw.observe(scene, AgentPose(1, 1, 0), Action.DONE, 0, None)
    mid = gw.N_RAYS // 2
    assert obs.hit_slots[mid] == gw.TARGET_SLOT_OFFSET
    assert obs.distances[mid] == pytest.approx(0.25)


def test_observation_layout_and_one_hots():
    scene = gw.generate_scene(2)
    obs = gw.observe(scene, AgentPose(*scene.free_cells()[0], 90, -30), Action.LOOK_DOWN, 2,
                     np.random.default_rng(0))
    assert obs.vector.shape == (gw.observation_size(3),)
    assert obs.vector.dtype == np.float32
    blk = obs.ray_block
    assert np.all(blk[:, 1:].sum(axis=1) == 1.0)
    assert np.all((blk[:, 0] >= 0) & (blk[:, 0] <= 1))
    assert obs.pitch.tolist() == [1, 0, 0]
    assert int(np.argmax(obs.last_action)) == Action.LOOK_DOWN and obs.last_action.sum() == 1
    assert obs.goal.tolist() == [0, 0, 1]
    assert obs.sensor.size == gw.sensor_size(3) == obs.vector.size - 3


def test_observe_deterministic_and_noise():
    scene = gw.generate_scene(2)
    pose = AgentPose(*scene.free_cells()[3], 0)
    a = gw.observe(scene, pose, Action.DONE, 0, None, 0.0)
    b = gw.observe(scene, pose, Action.DONE, 0, np.random.default_rng(1), 0.0)
    assert np.array_equal(a.vector, b.vector)
    n1 = gw.observe(scene, pose, Action.DONE, 0, np.random.default_rng(5), 0.02)
    n2 = gw.observe(scene, pose, Action.DONE, 0, np.random.default_rng(5), 0.02)
    assert np.array_equal(n1.vector, n2.vector)
    assert not np.array_equal(n1.distances, a.distances)
    assert np.array_equal(n1.hit_slots, a.hit_slots)


def test_ray_angles_span_fov():
    ang = gw.ray_angles(90)
    assert len(ang) == 15 and ang[0] == 45 and ang[-1] == 135 and ang[7] == 90
