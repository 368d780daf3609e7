import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermal_slam.features import FeatureSet, landmark_descriptors
from thermal_slam.geometry import CameraIntrinsics, Pose, project, so3_exp
from thermal_slam.mapping import (
    Frame,
    KeyFrame,
    Map,
    MapError,
    MapPoint,
    MapPolicy,
    check_visibility,
    cull_points,
    read_ply,
    rotation_difference_deg,
    should_insert_keyframe,
    validate_new_point,
    write_ply,
)

K = CameraIntrinsics(400, 400, 320, 240, width=640, height=480)


def blank_features(n, frame_id=0):
    return FeatureSet(np.zeros((n, 2)), np.ones(n), landmark_descriptors(np.arange(n)), frame_id)


def keyframe(kid, n_kp=200, pose=None):
    return KeyFrame(Frame(kid, 0.1 * kid, blank_features(n_kp, kid), pose or Pose.identity()))


def point(pred, obs):
    return MapPoint(0, np.zeros(3), np.array([1.0, 0, 0]), n_predicted_visible=pred, n_observed=obs)


# -- culling ----------------------------------------------------------------

@pytest.mark.parametrize(
    "pred,obs,culled",
    [(8, 2, False), (8, 1, True), (2, 0, False), (4, 0, True), (3, 0, False), (4, 1, False)],
)
def test_cull_rule(pred, obs, culled):
    assert (cull_points({0: point(pred, obs)}) == [0]) == culled


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 200), st.integers(0, 200))
def test_cull_never_removes_ratio_at_least_quarter(pred, obs):
    obs = min(obs, pred)
    removed = cull_points({0: point(pred, obs)})
    if pred and obs / pred >= 0.25:
        assert removed == []
    if pred < 4:
        assert removed == []


# -- keyframe decision ---------------------------------------------------------

def rot_y(deg):
    return so3_exp([0.0, np.deg2rad(deg), 0.0])


def test_keyframe_rotation_threshold():
    base = Pose.identity()
    assert should_insert_keyframe(Pose(rot_y(16), np.zeros(3)), base, 4.0)
    assert not should_insert_keyframe(Pose(rot_y(14), np.zeros(3)), base, 4.0)


def test_keyframe_translation_threshold():
    base = Pose.identity()
    d = 5.0
    moved = Pose(np.eye(3), -np.array([0.04 * d, 0, 0]))
    assert should_insert_keyframe(moved, base, d)
    small = Pose(rot_y(5), -rot_y(5) @ np.array([0.01 * d, 0, 0]))
    assert not should_insert_keyframe(small, base, d)


def test_keyframe_needs_positive_depth():
    with pytest.raises(ValueError):
        should_insert_keyframe(Pose.identity(), Pose.identity(), 0.0)


def test_euler_metric_single_axis_equals_angle():
    for axis in range(3):
        w = np.zeros(3)
        w[axis] = np.deg2rad(12.0)
        assert np.isclose(rotation_difference_deg(so3_exp(w), np.eye(3)), 12.0)
        assert np.isclose(rotation_difference_deg(so3_exp(w), np.eye(3), "geodesic"), 12.0)


def test_euler_metric_relative_not_absolute():
    # both orientations near gimbal lock: absolute Euler differencing would blow up
    A = so3_exp([0.0, np.deg2rad(89.9), 0.0])
    B = so3_exp([np.deg2rad(1.0), 0.0, 0.0]) @ A
    assert rotation_difference_deg(B, A) < 2.0


# -- covisibility ----------------------------------------------------------------

def build_counts_map(threshold=15):
    m = Map(K, MapPolicy(covisibility_threshold=threshold))
    a, b = keyframe(0), keyframe(1)
    m.insert_keyframe(a)
    m.insert_keyframe(b)
    pa = [m.new_point(np.zeros(3), np.ones(3)).id for _ in range(20)]
    pb = [m.new_point(np.zeros(3), np.ones(3)).id for _ in range(5)]
    for k, pid in enumerate(pa):
        m.add_observation(0, pid, k)
    for k, pid in enumerate(pb):
        m.add_observation(1, pid, k)
    return m, pa, pb


def test_covisibility_threshold_example():
    m, pa, pb = build_counts_map()
    obs = {pid: k for k, pid in enumerate(pa + pb)}
    m.insert_keyframe(KeyFrame(Frame(2, 0.2, blank_features(200, 2), Pose.identity()), obs))
    assert m.covisibility.weight(2, 0) == 20
    assert m.covisibility.weight(2, 1) == 0
    assert m.covisibility.neighbors(2) == [0]
    m.check_integrity()


def test_covisibility_equal_to_threshold_has_no_edge():
    m, pa, _ = build_counts_map()
    obs = {pid: k for k, pid in enumerate(pa[:15])}
    m.insert_keyframe(KeyFrame(Frame(2, 0.2, blank_features(200, 2), Pose.identity()), obs))
    assert m.covisibility.weight(2, 0) == 0
    obs = {pid: k for k, pid in enumerate(pa[:16])}
    m.insert_keyframe(KeyFrame(Frame(3, 0.3, blank_features(200, 3), Pose.identity()), obs))
    assert m.covisibility.weight(3, 0) == 16


def test_first_keyframe_has_no_edges():
    m = Map(K)
    m.insert_keyframe(keyframe(0))
    assert m.covisibility.neighbors(0) == [] and m.covisibility.nodes == [0]


def test_duplicate_keyframe_rejected():
    m = Map(K)
    m.insert_keyframe(keyframe(0))
    with pytest.raises(MapError):
        m.insert_keyframe(keyframe(0))


def test_observation_constraints():
    m = Map(K)
    m.insert_keyframe(keyframe(0, n_kp=3))
    p = m.new_point(np.zeros(3), np.ones(3))
    q = m.new_point(np.zeros(3), np.ones(3))
    m.add_observation(0, p.id, 0)
    with pytest.raises(MapError):
        m.add_observation(0, p.id, 1)  # same point twice in one keyframe
    with pytest.raises(MapError):
        m.add_observation(0, q.id, 0)  # keypoint already taken
    with pytest.raises(MapError):
        m.add_observation(0, q.id, 3)


def test_keyframe_without_pose_rejected():
    with pytest.raises(MapError):
        KeyFrame(Frame(0, 0.0, blank_features(2)))


ops = st.lists(
    st.one_of(
        st.tuples(st.just("kf"), st.lists(st.integers(0, 39), min_size=0, max_size=40, unique=True)),
        st.tuples(st.just("see"), st.integers(0, 39), st.integers(0, 12)),
        st.tuples(st.just("cull"), st.just(0)),
    ),
    max_size=25,
)


@settings(max_examples=60, deadline=None)
@given(ops, st.integers(0, 6))
def test_integrity_under_random_edits(seq, threshold):
    m = Map(K, MapPolicy(covisibility_threshold=threshold))
    pids = [m.new_point(np.zeros(3), np.ones(3)).id for _ in range(40)]
    next_kf = 0
    for op in seq:
        if op[0] == "kf":
            alive = [p for p in op[1] if p in m.points]
            m.insert_keyframe(KeyFrame(Frame(next_kf, 0.0, blank_features(40, next_kf), Pose.identity()),
                                       {p: k for k, p in enumerate(alive)}))
            for p in alive:
                m.points[p].mark_observed()
            next_kf += 1
        elif op[0] == "see" and pids[op[1]] in m.points:
            for _ in range(op[2]):
                m.points[pids[op[1]]].mark_visible()
        elif op[0] == "cull":
            m.cull_points()
        m.check_integrity()
        edges = m.covisibility.edges()
        for a in m.keyframes:
            for b in m.keyframes:
                assert m.covisibility.weight(a, b) == m.covisibility.weight(b, a)
        assert all(w > threshold for w in edges.values())


def test_cull_updates_graph():
    m, pa, _ = build_counts_map(threshold=15)
    obs = {pid: k for k, pid in enumerate(pa)}
    m.insert_keyframe(KeyFrame(Frame(2, 0.2, blank_features(200, 2), Pose.identity()), obs))
    for pid in pa[:6]:
        m.points[pid].n_predicted_visible = 40
        m.points[pid].n_observed = 2
    removed = m.cull_points()
    assert sorted(removed) == pa[:6]
    assert m.covisibility.weight(0, 2) == 0  # 14 shared left
    m.check_integrity()


# -- visibility --------------------------------------------------------------------

def visible_point(view_dir=(0, 0, 1.0), depth_range=(1.0, 10.0), X=(0, 0, 4.0)):
    v = np.asarray(view_dir, float)
    return MapPoint(0, np.asarray(X, float), np.array([1.0, 0, 0]), v / np.linalg.norm(v), depth_range)


def test_visibility_straight_ahead():
    p = visible_point()
    assert check_visibility(p, Pose.identity(), K)
    assert p.n_predicted_visible == 1


def test_visibility_view_angle_boundary():
    for ang, expected in ((59.0, True), (61.0, False)):
        a = np.deg2rad(ang)
        p = visible_point(view_dir=(np.sin(a), 0, np.cos(a)))
        assert check_visibility(p, Pose.identity(), K) == expected
    assert p.n_predicted_visible == 0


def test_visibility_depth_range():
    dmax = 4.0 / 1.2
    assert not check_visibility(visible_point(depth_range=(1.0, dmax)), Pose.identity(), K)
    assert check_visibility(visible_point(depth_range=(1.0, 4.0 / 0.99)), Pose.identity(), K)


def test_visibility_out_of_frame_or_behind():
    assert not check_visibility(visible_point(X=(10.0, 0, 4.0), view_dir=(10, 0, 4)), Pose.identity(), K)
    assert not check_visibility(visible_point(X=(0, 0, -4.0), view_dir=(0, 0, -1)), Pose.identity(), K)


def test_point_stats_follow_observers():
    m = Map(K)
    for kid, cx in ((0, 0.0), (1, 1.0)):
        m.insert_keyframe(keyframe(kid, pose=Pose(np.eye(3), -np.array([cx, 0, 0]))))
    p = m.new_point(np.array([0.5, 0.0, 4.0]), np.ones(3))
    m.add_observation(0, p.id, 0)
    m.add_observation(1, p.id, 0)
    m.update_point_stats(p.id)
    d = np.hypot(0.5, 4.0)
    assert np.allclose(p.depth_range, (0.8 * d, 1.25 * d))
    assert np.allclose(p.mean_view_dir, [0, 0, 1])
    m.update_point_stats_many([p.id])
    assert np.allclose(p.depth_range, (0.8 * d, 1.25 * d))


def test_rescale_scales_depth_ranges():
    m = Map(K)
    m.insert_keyframe(keyframe(0, pose=Pose(np.eye(3), np.array([0.2, 0, 0]))))
    p = m.new_point(np.array([0, 0, 4.0]), np.ones(3))
    p.depth_range = (1.0, 5.0)
    m.rescale(2.0)
    assert np.allclose(p.position, [0, 0, 8]) and p.depth_range == (2.0, 10.0)
    assert np.allclose(m.keyframes[0].pose.t, [0.4, 0, 0])


# -- new point validation -------------------------------------------------------------

def two_views():
    Ta = Pose.identity()
    Tb = Pose(so3_exp([0, -0.05, 0]), np.array([-0.3, 0, 0.0]))
    X = np.array([0.2, -0.1, 4.0])
    return Ta, Tb, X


def test_noise_free_point_valid():
    Ta, Tb, X = two_views()
    assert validate_new_point(X, [(Ta, project(K, Ta, X)), (Tb, project(K, Tb, X))], K)


def test_point_behind_second_camera_invalid():
    Ta, _, X = two_views()
    Tb = Pose(so3_exp([0, np.pi, 0]), np.array([0, 0, 2.0]))
    assert Tb.transform(X)[2] < 0
    assert not validate_new_point(X, [(Ta, project(K, Ta, X)), (Tb, np.array([320.0, 240.0]))], K)


def test_reprojection_error_gate():
    Ta, Tb, X = two_views()
    uvb = project(K, Tb, X)
    views = lambda e: [(Ta, project(K, Ta, X)), (Tb, uvb + [e, 0.0])]
    assert not validate_new_point(X, views(3.0), K, reproj_threshold=2.0)
    assert validate_new_point(X, views(1.5), K, reproj_threshold=2.0)


def test_parallax_gate():
    Ta = Pose.identity()
    Tb = Pose(np.eye(3), np.array([-0.01, 0, 0]))  # 0.14 deg at 4 m
    X = np.array([0.0, 0.0, 4.0])
    assert not validate_new_point(X, [(Ta, project(K, Ta, X)), (Tb, project(K, Tb, X))], K)


def test_scale_consistency_gate():
    Ta, Tb, X = two_views()
    v = [(Ta, project(K, Ta, X)), (Tb, project(K, Tb, X))]
    assert validate_new_point(X, v, K, median_depths=[4.0, 4.0])
    assert not validate_new_point(X, v, K, median_depths=[40.0, 40.0])
    assert validate_new_point(X, v, K, median_depths=[None, None])


def test_ply_roundtrip(tmp_path, rng):
    X = rng.normal(size=(25, 3))
    write_ply(X, tmp_path / "m.ply")
    assert np.allclose(read_ply(tmp_path / "m.ply"), X, atol=1e-8)
    write_ply(np.zeros((0, 3)), tmp_path / "e.ply")
    assert read_ply(tmp_path / "e.ply").shape == (0, 3)
