"""Scene fixtures shared by the test modules."""
import numpy as np

from winslam.geometry import rot_y, so3_exp


def two_view_scene(rng, R, t, n=100, depth=(2.0, 10.0), spread=1.0):
    """Points in front of both cameras of the relative pose ``x2 ~ R x1 + t``.

    Returns normalized observations (x1, x2) and the points in camera-1 frame.
    """
    pts = []
    while sum(len(p) for p in pts) < n:
        z = rng.uniform(*depth, size=n)
        xy = rng.uniform(-spread, spread, size=(n, 2)) * z[:, None] * 0.6
        X = np.column_stack([xy, z])
        X2 = X @ np.asarray(R).T + t
        pts.append(X[X2[:, 2] > 0.5])
    X = np.concatenate(pts)[:n]
    X2 = X @ np.asarray(R).T + t
    return X[:, :2] / X[:, 2:], X2[:, :2] / X2[:, 2:], X


def orbit_poses(n, radius=4.0, arc=np.deg2rad(40)):
    """Cameras on an arc around the origin, looking at it."""
    poses = []
    for a in np.linspace(-arc / 2, arc / 2, n):
        C = np.array([radius * np.sin(a), 0.0, -radius * np.cos(a)])
        R = rot_y(a)
        poses.append((R, C))
    return poses


def jitter_pose(rng, pose, rot_sigma, pos_sigma):
    R, C = pose
    return so3_exp(rng.normal(scale=rot_sigma, size=3)) @ R, C + rng.normal(scale=pos_sigma, size=3)
