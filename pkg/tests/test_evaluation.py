"""Trajectory and structure error, synthetic sequences, report formats."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winslam.bundle import GlobalMap
from winslam.errors import DegenerateSet, EmptyVisibility, NoAssociations
from winslam.evaluation import EvalReport, align_trajectory, associate, ate_rmse, count_breaks, depth_rmse
from winslam.geometry import apply_similarity, essential_from_pose, random_rotation
from winslam.synthetic import (
    MAX_PLANE_EXTENT,
    MotionProfile,
    ProfileKind,
    generate_sequence,
    make_scene,
    mean_pair_parallax,
    render_frame,
)


def random_path(rng, n=50):
    return np.cumsum(rng.normal(size=(n, 3)), axis=0)


# -- ATE ---------------------------------------------------------------------------


def test_ate_identity_is_zero():
    rng = np.random.default_rng(0)
    X = random_path(rng)
    assert ate_rmse(X, X) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_ate_invariant_under_similarity(seed, scale):
    rng = np.random.default_rng(seed)
    gt = random_path(rng)
    est = gt + rng.normal(0, 0.1, gt.shape)
    base = ate_rmse(est, gt)
    sim = (scale, random_rotation(rng), rng.normal(size=3) * 10)
    assert ate_rmse(apply_similarity(sim, est), gt) == pytest.approx(base, abs=1e-9)
    # the result is in ground-truth units, so moving gt scales the error with it
    assert ate_rmse(est, apply_similarity(sim, gt)) == pytest.approx(scale * base, rel=1e-9)


def test_ate_absorbs_similarity():
    rng = np.random.default_rng(1)
    gt = random_path(rng)
    est = apply_similarity((3.0, random_rotation(rng), np.array([1.0, -2.0, 5.0])), gt)
    assert ate_rmse(est, gt) < 1e-9


def test_ate_iid_noise_sqrt3():
    rng = np.random.default_rng(2)
    gt = rng.uniform(-20, 20, (1000, 3))
    est = gt + rng.normal(0, 0.01, gt.shape)
    assert ate_rmse(est, gt) == pytest.approx(np.sqrt(3) * 0.01, rel=0.1)


def test_ate_needs_three_poses():
    with pytest.raises(DegenerateSet):
        ate_rmse(np.zeros((2, 3)), np.zeros((2, 3)))


def test_straight_path_uses_orientations():
    rng = np.random.default_rng(3)
    n = 40
    gt = np.column_stack([np.zeros(n), np.zeros(n), np.linspace(0, 4, n)])
    gt_R = np.array([random_rotation(rng) for _ in range(n)])
    sim = (0.5, random_rotation(rng), rng.normal(size=3))
    est = apply_similarity(sim, gt)
    est_R = gt_R @ sim[1].T
    s, R, t = align_trajectory(est, gt, est_R, gt_R)
    np.testing.assert_allclose(R, sim[1].T, atol=1e-9)
    assert s == pytest.approx(2.0)


# -- depth -----------------------------------------------------------------------------


def test_depth_identity_zero():
    pts = {i: np.array([i, 2.0 * i, 1.0]) for i in range(10)}
    assert depth_rmse(pts, pts) == 0.0


def test_depth_noise_sqrt3():
    rng = np.random.default_rng(4)
    gt = {i: rng.uniform(-5, 5, 3) for i in range(2000)}
    est = {i: X + rng.normal(0, 0.01, 3) for i, X in gt.items()}
    assert depth_rmse(est, gt) == pytest.approx(np.sqrt(3) * 0.01, rel=0.1)


def test_depth_disjoint_ids():
    with pytest.raises(NoAssociations):
        depth_rmse({1: np.zeros(3)}, {2: np.zeros(3)})


def test_depth_applies_similarity():
    rng = np.random.default_rng(5)
    gt = {i: rng.uniform(-5, 5, 3) for i in range(20)}
    sim = (2.0, random_rotation(rng), rng.normal(size=3))
    inv_R = sim[1].T
    est = {i: inv_R @ (X - sim[2]) / sim[0] for i, X in gt.items()}
    assert depth_rmse(est, gt, sim) < 1e-12


# -- breaks and reports ----------------------------------------------------------------


def test_count_breaks():
    assert count_breaks(None) == 0
    assert count_breaks(GlobalMap()) == 0
    assert count_breaks(GlobalMap(breaks=[120])) == 1


def test_report_summary_line():
    rep = EvalReport(0.0123, 4.5, 1, [0.5, 0.7], {"bundle_adjustment": 1.0})
    assert rep.summary() == "ATE_RMSE_M=0.012300 DEPTH_RMSE_CM=4.500000 BREAKS=1"
    lines = rep.lines()
    assert lines[-1] == rep.summary()
    assert "breaks = 1" in lines
    assert all(" = " in line for line in lines[:-1])


def test_associate_tolerance():
    ie, ig = associate([0.0, 1.0, 2.0, 3.5], [2.0, 0.0, 1.0000001, 3.0], max_dt=1e-3)
    assert ie.tolist() == [0, 1, 2]
    assert ig.tolist() == [1, 2, 0]


# -- synthetic scenes ------------------------------------------------------------------


@pytest.mark.parametrize("kind,length", [("frontal", 2.0), ("left-right", 4.0), ("egomotion", 3.7)])
def test_profile_length_and_rigidity(kind, length):
    prof = MotionProfile(kind, length, seed=1)
    R, C = prof.poses()
    path = np.sum(np.linalg.norm(np.diff(C, axis=0), axis=1))
    assert path == pytest.approx(length, rel=0.01)
    np.testing.assert_allclose(R @ np.swapaxes(R, 1, 2), np.tile(np.eye(3), (len(R), 1, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)
    assert len(C) == prof.default_frames


def test_scene_points_on_planes_within_extent():
    prof = MotionProfile("egomotion", 3.7)
    scene = make_scene(prof, seed=2)
    for k, plane in enumerate(scene.planes):
        pts = scene.points[scene.plane_of == k]
        assert np.abs((pts - plane.center) @ plane.normal).max() < 1e-9
        assert max(plane.extent) <= MAX_PLANE_EXTENT


def test_noiseless_two_frames_satisfy_epipolar_constraint():
    prof = MotionProfile("left-right", 1.0)
    scene = make_scene(prof, n_planes=1, seed=3)
    seq = generate_sequence(scene, prof, n_frames=2, noise_px=0.0)
    (R1, R2), (C1, C2) = seq.rotations, seq.centers
    E = essential_from_pose(R2 @ R1.T, R2 @ (C1 - C2))
    a_ids, a_px = seq.table.observations_at(0)
    b_ids, b_px = seq.table.observations_at(1)
    common, ia, ib = np.intersect1d(a_ids, b_ids, return_indices=True)
    assert len(common) > 10
    x1 = np.column_stack([seq.intrinsics.normalize(a_px[ia]), np.ones(len(ia))])
    x2 = np.column_stack([seq.intrinsics.normalize(b_px[ib]), np.ones(len(ib))])
    assert np.abs(np.sum(x2 * (x1 @ E.T), axis=1)).max() < 1e-12


def test_noise_statistics():
    prof = MotionProfile("left-right", 1.0)
    scene = make_scene(prof, seed=4)
    clean = generate_sequence(scene, prof, noise_px=0.0, seed=9)
    noisy = generate_sequence(scene, prof, noise_px=0.5, seed=9)
    # match observations through the scene point, since track ids can differ
    a_ids, a_px = clean.table.observations_at(10)
    b_ids, b_px = noisy.table.observations_at(10)
    a_pts = np.array([clean.point_index[int(t)] for t in a_ids])
    b_pts = np.array([noisy.point_index[int(t)] for t in b_ids])
    common, ia, ib = np.intersect1d(a_pts, b_pts, return_indices=True)
    d = b_px[ib] - a_px[ia]
    assert np.std(d) == pytest.approx(0.5, rel=0.1)


def test_gap_blanks_frames():
    prof = MotionProfile("egomotion", 3.0)
    scene = make_scene(prof, seed=5)
    seq = generate_sequence(scene, prof, noise_px=0.0, gap=(30, 50))
    for f in range(30, 80):
        assert len(seq.table.observations_at(f)[0]) == 0
    before = set(seq.table.observations_at(29)[0].tolist())
    after = set(seq.table.observations_at(80)[0].tolist())
    assert before and after and not before & after
    seq.table.validate()


def test_empty_visibility():
    prof = MotionProfile("frontal", 1.0)
    scene = make_scene(prof, seed=6)
    scene.points = scene.points - np.array([0.0, 0.0, 100.0])  # everything behind the camera
    with pytest.raises(EmptyVisibility):
        generate_sequence(scene, prof, noise_px=0.0)


def test_egomotion_has_less_parallax_than_left_right():
    out = {}
    for kind in (ProfileKind.EGOMOTION, ProfileKind.LEFT_RIGHT):
        prof = MotionProfile(kind, 3.0, seed=0)
        seq = generate_sequence(make_scene(prof, seed=0), prof, noise_px=0.0)
        out[kind] = mean_pair_parallax(seq)
    assert out[ProfileKind.EGOMOTION] < out[ProfileKind.LEFT_RIGHT]


def test_sequence_deterministic():
    prof = MotionProfile("egomotion", 1.0, seed=3)
    a = generate_sequence(make_scene(prof, seed=3), prof, seed=3)
    b = generate_sequence(make_scene(prof, seed=3), prof, seed=3)
    for x, y in zip(a.table.to_arrays(), b.table.to_arrays()):
        np.testing.assert_array_equal(x, y)


def test_render_frame_textured():
    prof = MotionProfile("frontal", 1.0)
    scene = make_scene(prof, seed=7)
    R, C = prof.poses()
    img = render_frame(scene, R[0], C[0])
    assert img.shape == (scene.height, scene.width) and img.dtype == np.uint8
    assert img.std() > 10
