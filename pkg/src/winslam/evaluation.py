"""Trajectory and structure error against ground truth, break counting, reports."""
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSet, NoAssociations
from .geometry import apply_similarity, project_to_so3, umeyama_similarity


def associate(est_times, gt_times, max_dt=1e-6):
    """Index pairs ``(i_est, i_gt)`` of timestamps closer than ``max_dt``."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    if len(gt_times) == 0 or len(est_times) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt_times)
    g = gt_times[order]
    pos = np.clip(np.searchsorted(g, est_times), 1, len(g) - 1) if len(g) > 1 else np.zeros(len(est_times), int)
    cand = np.stack([pos - 1, pos], axis=1) if len(g) > 1 else pos[:, None]
    dt = np.abs(g[cand] - est_times[:, None])
    best = cand[np.arange(len(est_times)), np.argmin(dt, axis=1)]
    ok = np.abs(g[best] - est_times) <= max_dt
    return np.flatnonzero(ok), order[best[ok]]


# lateral spread (relative to length) below which positions cannot fix the
# rotation about a trajectory's main axis
COLLINEAR_RATIO = 0.01


def _is_collinear(X, ratio=COLLINEAR_RATIO):
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    return sv[1] <= ratio * max(sv[0], 1e-300)


def align_trajectory(est, gt, est_rot=None, gt_rot=None):
    """Similarity ``(s, R, t)`` taking estimated positions onto ground truth.

    Straight (collinear) trajectories are accepted. Positions then leave
    the rotation about the line (nearly) free; if camera orientations
    (world-to-camera) are given, the rotation is taken from them instead,
    with scale and translation fitted to the positions. A path counts as
    straight when its lateral spread is under 1% of its length.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) < 3:
        raise DegenerateSet(f"{len(est)} associated poses; need at least 3")
    if est_rot is not None and gt_rot is not None and _is_collinear(est):
        R = project_to_so3(np.einsum("nji,njk->ik", np.asarray(gt_rot), np.asarray(est_rot)))
        ds = est - est.mean(axis=0)
        dd = gt - gt.mean(axis=0)
        s = float(np.sum(dd * (ds @ R.T)) / np.sum(ds * ds))
        return s, R, gt.mean(axis=0) - s * R @ est.mean(axis=0)
    return umeyama_similarity(est, gt, allow_collinear=True)


def ate_rmse(est, gt, sim=None):
    """RMSE of positions after 7-dof alignment of ``est`` onto ``gt``.

    Both are (N, 3) arrays of already associated positions.
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    sim = sim or align_trajectory(est, gt)
    d = apply_similarity(sim, est) - gt
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def depth_rmse(points, gt_points, sim=(1.0, np.eye(3), np.zeros(3))):
    """RMSE (same units as ground truth) over track ids present in both maps.

    ``sim`` brings the estimate into the ground-truth frame first.
    """
    common = sorted(set(points) & set(gt_points))
    if not common:
        raise NoAssociations("no track id is shared with the ground truth")
    X = apply_similarity(sim, np.array([points[t] for t in common]))
    G = np.array([gt_points[t] for t in common])
    return float(np.sqrt(np.mean(np.sum((X - G) ** 2, axis=1))))


def count_breaks(gmap):
    """Number of segment boundaries recorded in a map (0 for an empty map)."""
    if gmap is None:
        return 0
    return len(gmap.breaks)


@dataclass
class EvalReport:
    ate_rmse: float = float("nan")  # m
    depth_rmse: float = float("nan")  # cm
    breaks: int = 0
    window_rmse: list = field(default_factory=list)  # px
    timings: dict = field(default_factory=dict)  # s
    extra: dict = field(default_factory=dict)

    def summary(self):
        return f"ATE_RMSE_M={self.ate_rmse:.6f} DEPTH_RMSE_CM={self.depth_rmse:.6f} BREAKS={self.breaks}"

    def lines(self):
        out = [
            f"ate_rmse_m = {self.ate_rmse:.9g}",
            f"depth_rmse_cm = {self.depth_rmse:.9g}",
            f"breaks = {self.breaks}",
            "window_rmse_px = " + " ".join(f"{v:.6g}" for v in self.window_rmse),
        ]
        out += [f"time_{k}_s = {v:.6f}" for k, v in self.timings.items()]
        out += [f"{k} = {v}" for k, v in self.extra.items()]
        out.append(self.summary())
        return out


def evaluate_map(gmap, gt_times, gt_centers, gt_points=None, gt_rotations=None, max_dt=1e-6):
    """ATE (m) and depth RMSE (cm) of a map, one alignment per segment.

    Each segment has its own gauge, so it is aligned separately; the errors
    of all segments are pooled into one RMSE. Segments with fewer than three
    associated keyframes are skipped.
    """
    traj = gmap.trajectory()
    seg_sq, depth_sq = [], []
    for seg in range(len(gmap.segments)):
        rows = [r for r in traj if r[4] == seg]
        if len(rows) < 3:
            continue
        times = np.array([r[1] for r in rows])
        C = np.array([r[3] for r in rows])
        Rs = np.array([r[2] for r in rows])
        ie, ig = associate(times, gt_times, max_dt)
        if len(ie) < 3:
            continue
        if gt_rotations is None:
            sim = align_trajectory(C[ie], gt_centers[ig])
        else:
            sim = align_trajectory(C[ie], gt_centers[ig], Rs[ie], gt_rotations[ig])
        d = apply_similarity(sim, C[ie]) - gt_centers[ig]
        seg_sq.append(np.sum(d * d, axis=1))
        if gt_points is not None:
            pts = {t: X for t, X in gmap.points.items() if gmap.point_segment(t) == seg and t in gt_points}
            if pts:
                G = np.array([gt_points[t] for t in pts])
                X = apply_similarity(sim, np.array(list(pts.values())))
                depth_sq.append(np.sum((X - G) ** 2, axis=1))
    if not seg_sq:
        raise DegenerateSet("no segment has three associated keyframes")
    ate = float(np.sqrt(np.mean(np.concatenate(seg_sq))))
    depth = float(np.sqrt(np.mean(np.concatenate(depth_sq)))) * 100 if depth_sq else float("nan")
    return ate, depth
