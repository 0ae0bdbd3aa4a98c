import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from helpers import two_view_scene
from winslam.errors import (
    BehindCamera,
    CheiralityTie,
    DegenerateConfiguration,
    DegenerateSet,
    LowParallax,
)
from winslam.geometry import (
    CameraIntrinsics,
    RansacConfig,
    angle_between,
    apply_distortion,
    apply_similarity,
    correct_distortion,
    decompose_essential,
    essential_from_pose,
    estimate_relative_pose,
    matrix_to_quat,
    project,
    quat_to_matrix,
    rot_x,
    rot_y,
    rot_z,
    rotation_distance,
    so3_exp,
    so3_log,
    triangulate_linear,
    umeyama_similarity,
)

rotvecs = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3).map(np.array)


@given(rotvecs, st.floats(0.0, np.pi - 1e-3))
def test_rotation_invariants(axis, angle):
    n = np.linalg.norm(axis)
    w = axis / n * angle if n > 1e-3 else np.zeros(3)
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-9)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-9)


def test_log_near_pi():
    R = rot_z(np.pi - 1e-7)
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-9)
    assert np.isclose(np.linalg.norm(so3_log(rot_x(np.pi))), np.pi)


# -- relative pose -----------------------------------------------------------


def test_relative_pose_exact():
    rng = np.random.default_rng(1)
    R, t = rot_x(np.deg2rad(10)), np.array([1.0, 0.0, 0.0])
    x1, x2, _ = two_view_scene(rng, R, t)
    rel = estimate_relative_pose(x1, x2, RansacConfig(seed=3))
    assert rotation_distance(rel.rotation, R) < 1e-6
    assert angle_between(rel.direction, t) < 1e-6
    assert rel.translation_reliable
    assert rel.inlier_count == 100


@pytest.mark.parametrize("seed", range(8))
def test_relative_pose_noiseless_recovery_random(seed):
    rng = np.random.default_rng(100 + seed)
    R = so3_exp(rng.normal(scale=0.2, size=3))
    t = rng.normal(size=3)
    t[2] = abs(t[2]) * 0.3
    t /= np.linalg.norm(t)
    x1, x2, _ = two_view_scene(rng, R, t, n=10 + seed * 5)
    rel = estimate_relative_pose(x1, x2, RansacConfig(seed=seed))
    assert rotation_distance(rel.rotation, R) < 1e-6
    assert angle_between(rel.direction, t) < 1e-6


def test_relative_pose_zero_baseline_flags_translation():
    rng = np.random.default_rng(2)
    R = rot_y(np.deg2rad(8))
    x1, x2, _ = two_view_scene(rng, R, np.zeros(3))
    rel = estimate_relative_pose(x1, x2, RansacConfig(seed=0))
    assert not rel.translation_reliable
    assert rotation_distance(rel.rotation, R) < 1e-9


def test_relative_pose_too_few():
    with pytest.raises(DegenerateConfiguration):
        estimate_relative_pose(np.zeros((7, 2)), np.zeros((7, 2)))


def test_relative_pose_coincident_points():
    with pytest.raises(DegenerateConfiguration):
        estimate_relative_pose(np.zeros((20, 2)), np.zeros((20, 2)), RansacConfig(max_iters=64))


def test_relative_pose_outliers_monte_carlo():
    rot_err, inliers = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        R, t = rot_y(np.deg2rad(5)), np.array([1.0, 0.1, 0.3])
        x1, x2, _ = two_view_scene(rng, R, t)
        sigma = 0.5 / 500.0
        x1 = x1 + rng.normal(scale=sigma, size=x1.shape)
        x2 = x2 + rng.normal(scale=sigma, size=x2.shape)
        bad = rng.choice(100, 30, replace=False)
        x2[bad] = rng.uniform(-0.64, 0.64, size=(30, 2))
        rel = estimate_relative_pose(x1, x2, RansacConfig(seed=seed))
        rot_err.append(np.rad2deg(rotation_distance(rel.rotation, R)))
        inliers.append(rel.inlier_count)
    assert np.percentile(rot_err, 95) < 0.5
    assert np.percentile(inliers, 5) >= 65


# -- decomposition -----------------------------------------------------------


def test_decompose_forward_translation():
    rng = np.random.default_rng(0)
    t = np.array([0.0, 0.0, 1.0])
    x1, x2, _ = two_view_scene(rng, np.eye(3), t, n=30)
    cands, win = decompose_essential(essential_from_pose(np.eye(3), t), x1, x2)
    R, tt = cands[win]
    assert np.allclose(R, np.eye(3), atol=1e-12)
    assert np.allclose(tt, t, atol=1e-12)


def test_decompose_matches_construction():
    rng = np.random.default_rng(5)
    R, t = rot_y(np.deg2rad(5)), np.array([1.0, 0.0, 0.2])
    x1, x2, _ = two_view_scene(rng, R, t, n=50)
    cands, win = decompose_essential(essential_from_pose(R, t), x1, x2)
    assert len(cands) == 4
    Rw, tw = cands[win]
    assert rotation_distance(Rw, R) < 1e-9
    assert angle_between(tw, t) < 1e-9
    # every noiseless inlier lands in front of both views
    from winslam.geometry import two_view_depths

    l1, l2 = two_view_depths(Rw, tw, x1, x2)
    assert np.mean((l1 > 0) & (l2 > 0)) >= 0.99


def test_decompose_empty_is_tie():
    with pytest.raises(CheiralityTie) as err:
        decompose_essential(essential_from_pose(np.eye(3), [1, 0, 0]), np.zeros((0, 2)), np.zeros((0, 2)))
    assert len(err.value.candidates) == 4


# -- triangulation -----------------------------------------------------------


def _midpoint(poses, obs):
    """Two-view midpoint method: closest points of the two world rays."""
    (R1, C1), (R2, C2) = poses
    d1 = R1.T @ np.append(obs[0], 1.0)
    d2 = R2.T @ np.append(obs[1], 1.0)
    A = np.column_stack([d1, -d2])
    a, b = np.linalg.lstsq(A, C2 - C1, rcond=None)[0]
    return 0.5 * ((C1 + a * d1) + (C2 + b * d2))


def test_triangulate_exact_two_view():
    X = np.array([0.0, 0.0, 5.0])
    poses = [(np.eye(3), np.zeros(3)), (np.eye(3), np.array([1.0, 0.0, 0.0]))]
    obs = [(X - C)[:2] / (X - C)[2] for _, C in poses]
    assert np.allclose(triangulate_linear(poses, obs), X, atol=1e-9)


def test_triangulate_noisy_agrees_with_midpoint():
    rng = np.random.default_rng(0)
    X = np.array([0.0, 0.0, 5.0])
    poses = [(np.eye(3), np.zeros(3)), (np.eye(3), np.array([1.0, 0.0, 0.0]))]
    dlt_err, mid_err = [], []
    for _ in range(200):
        obs = [(X - C)[:2] / (X - C)[2] + rng.normal(scale=0.5 / 500, size=2) for _, C in poses]
        dlt_err.append(np.linalg.norm(triangulate_linear(poses, obs) - X))
        mid_err.append(np.linalg.norm(_midpoint(poses, obs) - X))
    oracle = np.sqrt(np.mean(np.square(mid_err)))
    ours = np.sqrt(np.mean(np.square(dlt_err)))
    assert abs(ours - oracle) < 0.1 * oracle


def test_triangulate_identical_centres():
    poses = [(np.eye(3), np.zeros(3)), (rot_y(0.001), np.zeros(3))]
    with pytest.raises(LowParallax):
        triangulate_linear(poses, [np.zeros(2), np.zeros(2)])


def test_triangulate_behind():
    X = np.array([0.0, 0.0, -5.0])
    poses = [(np.eye(3), np.zeros(3)), (np.eye(3), np.array([1.0, 0.0, 0.0]))]
    obs = [(X - C)[:2] / (X - C)[2] for _, C in poses]
    with pytest.raises(BehindCamera):
        triangulate_linear(poses, obs)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_triangulate_then_project_noiseless(seed):
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(500.0, 320.0, 240.0)
    X = rng.uniform([-2, -2, 4], [2, 2, 8])
    poses = [(so3_exp(rng.normal(scale=0.05, size=3)), rng.uniform(-1, 1, 3)) for _ in range(3)]
    px = [project(intr, p, X) for p in poses]
    Xh = triangulate_linear(poses, [intr.normalize(p) for p in px])
    for p, u in zip(poses, px):
        assert np.linalg.norm(project(intr, p, Xh) - u) <= 1e-7


# -- similarity --------------------------------------------------------------


def test_umeyama_identity():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(10, 3))
    s, R, t = umeyama_similarity(P, P)
    assert np.isclose(s, 1.0) and np.allclose(R, np.eye(3)) and np.allclose(t, 0)


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(10, 3))
    R0 = rot_z(np.deg2rad(30))
    Q = 2.5 * P @ R0.T + np.array([1.0, 2.0, 3.0])
    s, R, t = umeyama_similarity(P, Q)
    assert abs(s - 2.5) < 1e-9
    assert np.allclose(R, R0, atol=1e-9)
    assert np.allclose(t, [1, 2, 3], atol=1e-9)


def test_umeyama_collinear():
    P = np.array([[0.0, 0, 0], [1, 1, 1], [2, 2, 2]])
    with pytest.raises(DegenerateSet):
        umeyama_similarity(P, P)


def test_umeyama_local_optimality():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(20, 3))
    Q = 1.7 * P @ rot_x(0.3).T + 0.5 + rng.normal(scale=0.05, size=P.shape)
    sim = umeyama_similarity(P, Q)
    best = np.sum((apply_similarity(sim, P) - Q) ** 2)
    s, R, t = sim
    for _ in range(100):
        pert = (
            s * np.exp(rng.normal(scale=1e-3)),
            so3_exp(rng.normal(scale=1e-3, size=3)) @ R,
            t + rng.normal(scale=1e-3, size=3),
        )
        assert np.sum((apply_similarity(pert, P) - Q) ** 2) >= best


# -- projection --------------------------------------------------------------


def test_project_on_axis_and_offset():
    intr = CameraIntrinsics(500.0, 320.0, 240.0)
    pose = (np.eye(3), np.zeros(3))
    assert np.allclose(project(intr, pose, [0, 0, 5]), [320, 240])
    assert np.allclose(project(intr, pose, [1, 0, 5]), [420, 240])


def test_project_behind():
    with pytest.raises(BehindCamera):
        project(CameraIntrinsics(500.0, 0, 0), (np.eye(3), np.zeros(3)), [0, 0, -1])


def test_distortion_scalar_root():
    # observed radius solves rho * (1 + 0.1 rho^2) = 0.2
    oracle = brentq(lambda rho: rho * (1 + 0.1 * rho**2) - 0.2, 0.0, 0.2)
    x = apply_distortion(np.array([0.2, 0.0]), 0.1)
    assert abs(x[0] - oracle) < 1e-12 and x[1] == 0.0
    assert abs(x[0] - 0.199208) < 2e-6


@given(st.floats(-0.5, 0.5), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_distortion_roundtrip(r, u, v):
    x_obs = np.array([u, v])
    rr = r * (u * u + v * v)
    # the radial map is invertible while 1 + 3 r |x|^2 > 0
    if rr >= 0.5 or rr <= -0.3:
        return
    ideal = correct_distortion(x_obs, r)
    assert np.allclose(apply_distortion(ideal, r), x_obs, atol=1e-9)
