"""Projective and epipolar geometry.

Conventions used throughout the package:

* A camera pose is ``(R, C)``: ``R`` rotates world coordinates into the
  camera frame and ``C`` is the camera centre, so ``X_cam = R @ (X - C)``.
* The relative pose of camera ``j`` with respect to camera ``i`` is
  ``R_ij = R_j R_i^T`` and ``t_ij ~ R_j (C_i - C_j)``, which gives
  ``X_cam_j = R_ij X_cam_i + t_ij`` and ``x_j^T E x_i = 0`` with
  ``E = [t_ij]_x R_ij``.
* Normalized image coordinates are ``(px - principal_point) / focal``.
* Angles are radians.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    CheiralityTie,
    DegenerateConfiguration,
    DegenerateSet,
    InsufficientInliers,
    LowParallax,
)

TRI_OK = 0
TRI_LOW_PARALLAX = 1
TRI_BEHIND = 2

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Rotations


def skew(v):
    """Cross-product matrix; works on (3,) or (..., 3) input."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(w):
    """Rodrigues map from rotation vectors (..., 3) to matrices (..., 3, 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    K2 = K @ K
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R):
    """Rotation vector(s) of R, accurate over the whole range [0, pi]."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    tr = np.trace(flat, axis1=1, axis2=2)
    theta = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    vee = np.stack(
        [flat[:, 2, 1] - flat[:, 1, 2], flat[:, 0, 2] - flat[:, 2, 0], flat[:, 1, 0] - flat[:, 0, 1]],
        axis=1,
    )
    small = theta < 1e-6
    sin = np.where(small, 1.0, np.sin(theta))
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / (2.0 * sin))
    w = vee * scale[:, None]
    near_pi = theta > np.pi - 1e-3
    if np.any(near_pi):
        # vee vanishes at pi; the axis is the dominant column of R + I
        for i in np.flatnonzero(near_pi):
            B = (flat[i] + flat[i].T) / 2.0 - np.cos(theta[i]) * np.eye(3)
            col = int(np.argmax(np.diag(B)))
            axis = B[:, col] / np.linalg.norm(B[:, col])
            if axis @ vee[i] < 0:
                axis = -axis
            w[i] = axis * theta[i]
    return w.reshape(R.shape[:-2] + (3,))


def rotation_angle(R):
    """Geodesic angle of a rotation (its distance from the identity)."""
    tr = np.trace(np.asarray(R), axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def rotation_distance(R1, R2):
    """Intrinsic distance ||log(R2 R1^-1)||_F / sqrt(2), i.e. the angle of R2 R1^T."""
    return np.linalg.norm(so3_log(np.asarray(R2) @ np.swapaxes(R1, -1, -2)), axis=-1)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def project_to_so3(M):
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def quat_to_matrix(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def bearings(x):
    """Unit viewing rays for normalized image points (N, 2)."""
    x = np.asarray(x, dtype=float)
    b = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def angle_between(u, v):
    """Angle between vectors along the last axis (robust near 0 and pi)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    return np.arctan2(cross, dot)


# ---------------------------------------------------------------------------
# Camera model


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with one radial distortion coefficient.

    The radial model maps an observed normalized point ``x`` to the ideal
    pinhole point ``x * (1 + r * |x|^2)``; correction is therefore applied
    to observations, and projection has to invert it.
    """

    focal: float
    cx: float
    cy: float
    r: float = 0.0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")

    @property
    def principal_point(self):
        return np.array([self.cx, self.cy])

    def normalize(self, px):
        """Pixels to distortion-corrected normalized coordinates."""
        n = (np.asarray(px, dtype=float) - self.principal_point) / self.focal
        return correct_distortion(n, self.r)

    def to_pixels(self, x_ideal):
        """Ideal normalized coordinates to observed pixels."""
        return apply_distortion(x_ideal, self.r) * self.focal + self.principal_point


def correct_distortion(x_obs, r):
    """Observed normalized points to ideal ones: ``x * (1 + r |x|^2)``."""
    x_obs = np.asarray(x_obs, dtype=float)
    if r == 0.0:
        return x_obs.copy()
    return x_obs * (1.0 + r * np.sum(x_obs**2, axis=-1, keepdims=True))


def apply_distortion(x_ideal, r, iters=30):
    """Inverse of :func:`correct_distortion`.

    Solves the radial cubic ``r*rho^3 + rho - rho_ideal = 0`` by Newton's
    method, starting from the ideal radius.
    """
    x_ideal = np.asarray(x_ideal, dtype=float)
    if r == 0.0:
        return x_ideal.copy()
    rho_i = np.linalg.norm(x_ideal, axis=-1)
    rho = rho_i.copy()
    for _ in range(iters):
        f = r * rho**3 + rho - rho_i
        step = f / (3.0 * r * rho**2 + 1.0)
        rho = rho - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(rho_i, 1.0)):
            break
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(rho_i > 0, rho / np.where(rho_i > 0, rho_i, 1.0), 1.0)
    return x_ideal * k[..., None]


def transform_to_camera(R, C, X):
    return (np.asarray(X, dtype=float) - C) @ np.asarray(R).T


def project(intr, pose, X):
    """Project a world point through ``pose = (R, C)`` to observed pixels."""
    R, C = pose
    Xc = transform_to_camera(R, C, X)
    if np.any(Xc[..., 2] <= 0):
        raise BehindCamera("point has non-positive depth")
    return intr.to_pixels(Xc[..., :2] / Xc[..., 2:3])


# ---------------------------------------------------------------------------
# Essential matrix


@dataclass
class RansacConfig:
    seed: int = 0
    max_iters: int = 1000
    # Sampson distance in normalized units; 3e-3 is 1.5 px at focal 500
    threshold: float = 3e-3
    min_inlier_ratio: float = 0.33
    confidence: float = 0.999
    solver: str = "eight_point"
    parallax_reliable: float = np.deg2rad(0.5)
    batch: int = 64
    # hypotheses are scored on at most this many points
    score_points: int = 400
    # robust refinement uses at most this many inliers
    refine_points: int = 800


@dataclass
class RelativePose:
    rotation: np.ndarray
    direction: np.ndarray
    inlier_count: int
    edge_weight: float
    translation_reliable: bool = True
    median_parallax: float = 0.0
    inliers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        self.direction = self.direction / np.linalg.norm(self.direction)


def essential_from_pose(R, t):
    return skew(np.asarray(t, dtype=float)) @ R


def project_to_essential(E):
    """Closest matrix with singular values (s, s, 0), scaled to unit norm."""
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt / np.sqrt(2.0)


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(np.sum((x - c) ** 2, axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _epipolar_rows(x1, x2):
    """Rows of the linear system ``x2^T E x1 = 0`` for (..., N, 2) inputs."""
    h1 = np.concatenate([x1, np.ones(x1.shape[:-1] + (1,))], axis=-1)
    h2 = np.concatenate([x2, np.ones(x2.shape[:-1] + (1,))], axis=-1)
    return (h2[..., :, None] * h1[..., None, :]).reshape(x1.shape[:-1] + (9,))


def essential_eight_point(x1, x2):
    """Normalized eight-point estimate, projected onto the essential manifold.

    Accepts (N, 2) arrays with N >= 8, or stacked (K, 8, 2) minimal samples,
    in which case K matrices are returned.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.ndim == 3:
        return _eight_point_batch(x1, x2)
    T1, T2 = _hartley(x1), _hartley(x2)
    y1 = x1 @ T1[:2, :2].T + T1[:2, 2]
    y2 = x2 @ T2[:2, :2].T + T2[:2, 2]
    A = _epipolar_rows(y1, y2)
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    F = Vt[-1].reshape(3, 3)
    return project_to_essential(T2.T @ F @ T1)


def _eight_point_batch(x1, x2):
    c1 = x1.mean(axis=1, keepdims=True)
    c2 = x2.mean(axis=1, keepdims=True)
    s1 = np.sqrt(2.0) / np.maximum(np.linalg.norm(x1 - c1, axis=2).mean(axis=1), 1e-12)
    s2 = np.sqrt(2.0) / np.maximum(np.linalg.norm(x2 - c2, axis=2).mean(axis=1), 1e-12)
    y1 = (x1 - c1) * s1[:, None, None]
    y2 = (x2 - c2) * s2[:, None, None]
    A = _epipolar_rows(y1, y2)
    _, sv, Vt = np.linalg.svd(A, full_matrices=True)
    F = Vt[:, -1].reshape(-1, 3, 3)
    K = len(x1)
    T1 = np.zeros((K, 3, 3))
    T1[:, 0, 0] = T1[:, 1, 1] = s1
    T1[:, :2, 2] = -s1[:, None] * c1[:, 0]
    T1[:, 2, 2] = 1.0
    T2 = np.zeros((K, 3, 3))
    T2[:, 0, 0] = T2[:, 1, 1] = s2
    T2[:, :2, 2] = -s2[:, None] * c2[:, 0]
    T2[:, 2, 2] = 1.0
    E = np.swapaxes(T2, 1, 2) @ F @ T1
    U, _, Vt2 = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt2 / np.sqrt(2.0)
    # a minimal sample whose system has a second null vector cannot fix E
    rank_ok = sv[:, 7] > 1e-9 * sv[:, 0]
    return E, rank_ok


def sampson_distance(E, x1, x2):
    """First-order geometric distance of correspondences to E.

    ``E`` may be (3, 3) or a stack (K, 3, 3); the result is (N,) or (K, N).
    """
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    Ex1 = h1 @ np.swapaxes(E, -1, -2)
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=-1)
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def two_view_depths(R, t, x1, x2):
    """Depths (lambda1, lambda2) with ``lambda2 x2 = lambda1 R x1 + t``."""
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)
    a = h1 @ np.asarray(R).T
    b = -h2
    aa = np.sum(a * a, axis=1)
    ab = np.sum(a * b, axis=1)
    bb = np.sum(b * b, axis=1)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    l1 = (-at * bb + bt * ab) / det
    l2 = (-bt * aa + at * ab) / det
    return l1, l2


def decompose_essential(E, x1, x2):
    """Four (R, t) candidates of E and the index of the cheirality winner.

    The winner puts the largest number of correspondences in front of both
    cameras; it must beat every other candidate strictly.
    """
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=float))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Ra = U @ _W @ Vt
    Rb = U @ _W.T @ Vt
    t = U[:, 2]
    candidates = [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    counts = []
    for R, tt in candidates:
        if len(x1) == 0:
            counts.append(0)
            continue
        l1, l2 = two_view_depths(R, tt, x1, x2)
        counts.append(int(np.sum((l1 > 0) & (l2 > 0))))
    order = np.argsort(counts)[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise CheiralityTie("no decomposition strictly wins the depth test", candidates)
    return candidates, int(order[0])


def kabsch_rotation(b1, b2, weights=None):
    """Rotation R minimizing sum |b2 - R b1|^2 (no translation, no scale)."""
    w = np.ones(len(b1)) if weights is None else weights
    H = (b2 * w[:, None]).T @ b1
    return project_to_so3(H)


def _sample_indices(rng, n, k, size):
    """``size`` rows of ``k`` distinct indices below ``n``.

    Rows are cut from consecutive random permutations, which is much
    cheaper than ranking ``n`` random keys per row.
    """
    per = n // k
    reps = -(-size // per)
    idx = np.concatenate([rng.permutation(n)[: per * k] for _ in range(reps)])
    return idx.reshape(-1, k)[:size]


def _minimal_hypotheses(x1, x2, idx, solver):
    if solver == "eight_point":
        E, ok = essential_eight_point(x1[idx], x2[idx])
        return E[ok]
    if solver == "five_point":
        from .fivepoint import essential_five_point

        out = []
        for row in idx:
            out.extend(essential_five_point(x1[row], x2[row]))
        return np.array(out).reshape(-1, 3, 3)
    raise ValueError(f"unknown minimal solver {solver!r}")


def _score_subset(rng, n, m):
    if n <= m:
        return np.arange(n)
    return np.sort(rng.choice(n, m, replace=False))


def _ransac_essential(x1, x2, cfg):
    n = len(x1)
    k = 8 if cfg.solver == "eight_point" else 5
    rng = np.random.default_rng(cfg.seed)
    sub = _score_subset(rng, n, cfg.score_points)
    s1, s2 = x1[sub], x2[sub]
    th2 = cfg.threshold**2
    best_cost = np.inf
    best_E = None
    needed = cfg.max_iters
    done = 0
    tried_any = False
    while done < min(needed, cfg.max_iters):
        size = min(cfg.batch, cfg.max_iters - done)
        idx = _sample_indices(rng, n, k, size)
        done += size
        Es = _minimal_hypotheses(x1, x2, idx, cfg.solver)
        if len(Es) == 0:
            continue
        tried_any = True
        d2 = sampson_distance(Es, s1, s2) ** 2
        cost = np.minimum(d2, th2).sum(axis=1)
        i = int(np.argmin(cost))
        if cost[i] < best_cost:
            best_cost = cost[i]
            best_E = Es[i]
            ratio = np.mean(d2[i] <= th2)
            p_good = ratio**k
            if p_good >= 1.0 - 1e-12:
                needed = 0
            elif p_good > 0:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log(1 - p_good)))
    if not tried_any:
        raise DegenerateConfiguration("every minimal sample was degenerate")
    # local optimization on all points: refit on the inliers while it helps
    E = best_E
    d2 = sampson_distance(E, x1, x2) ** 2
    best_cost = np.minimum(d2, th2).sum()
    inl = d2 <= th2
    for _ in range(5):
        if inl.sum() < 8:
            break
        E_new = essential_eight_point(x1[inl], x2[inl])
        d2 = sampson_distance(E_new, x1, x2) ** 2
        cost = np.minimum(d2, th2).sum()
        if cost >= best_cost:
            break
        best_cost, E = cost, E_new
        inl = d2 <= th2
    return E, inl


def _ransac_rotation(b1, b2, cfg):
    """Two-point RANSAC for a pure rotation ``b2 ~ R b1``; (None, None) if degenerate."""
    n = len(b1)
    rng = np.random.default_rng([cfg.seed, 1])
    idx = _sample_indices(rng, n, 2, min(cfg.max_iters, 4 * cfg.batch))
    p, q = b1[idx], b2[idx]
    ok = angle_between(p[:, 0], p[:, 1]) > 1e-6
    if not np.any(ok):
        return None, None
    H = np.einsum("kni,knj->kij", q[ok], p[ok])
    U, _, Vt = np.linalg.svd(H)
    D = np.ones((len(H), 3))
    D[:, 2] = np.sign(np.linalg.det(U @ Vt))
    Rs = (U * D[:, None, :]) @ Vt
    # score on a subset with the chordal distance (~ angle for small angles)
    sub = _score_subset(rng, n, cfg.score_points)
    chord2 = 2.0 - 2.0 * np.sum((Rs @ b1[sub].T) * b2[sub].T[None], axis=1)
    cost = np.minimum(chord2, cfg.threshold**2).sum(axis=1)
    R = Rs[int(np.argmin(cost))]
    for _ in range(3):
        inl = angle_between(b1 @ R.T, b2) <= cfg.threshold
        if inl.sum() < 2:
            break
        R = kabsch_rotation(b1[inl], b2[inl])
    inl = angle_between(b1 @ R.T, b2) <= cfg.threshold
    return R, inl


def _sphere_basis(t):
    t = t / np.linalg.norm(t)
    a = np.eye(3)[np.argmin(np.abs(t))]
    u = np.cross(t, a)
    u /= np.linalg.norm(u)
    return np.column_stack([u, np.cross(t, u)])


def _refine_pose(R, t, x1, x2, scale, iters=8):
    """Minimize robust Sampson distances over the 5-dof (R, t-direction).

    Iteratively reweighted Gauss-Newton with Huber weights; the Jacobian is
    taken by forward differences.
    """
    h1 = np.concatenate([x1, np.ones((len(x1), 1))], axis=1)
    h2 = np.concatenate([x2, np.ones((len(x2), 1))], axis=1)

    def residuals(Rp, tp):
        E = essential_from_pose(Rp, tp)
        Ex1 = h1 @ E.T
        Etx2 = h2 @ E
        num = np.sum(h2 * Ex1, axis=1)
        den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
        return num / np.sqrt(np.maximum(den, 1e-300))

    def update(Rp, tp, p, B):
        tt = tp + B @ p[3:]
        return so3_exp(p[:3]) @ Rp, tt / np.linalg.norm(tt)

    def cost(r):
        a = np.abs(r)
        return np.sum(np.where(a <= scale, 0.5 * r * r, scale * (a - 0.5 * scale)))

    res = residuals(R, t)
    c = cost(res)
    h = 1e-7
    for _ in range(iters):
        B = _sphere_basis(t)
        J = np.empty((len(res), 5))
        for k in range(5):
            d = np.zeros(5)
            d[k] = h
            J[:, k] = (residuals(*update(R, t, d, B)) - res) / h
        w = np.where(np.abs(res) <= scale, 1.0, scale / np.maximum(np.abs(res), 1e-300))
        A = J.T @ (J * w[:, None])
        g = J.T @ (w * res)
        try:
            step = -np.linalg.solve(A + 1e-12 * np.trace(A) * np.eye(5), g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(10):
            R2, t2 = update(R, t, step, B)
            res2 = residuals(R2, t2)
            c2 = cost(res2)
            if c2 <= c:
                accepted = True
                break
            step = step / 2
        if not accepted:
            break
        R, t, res, done = R2, t2, res2, c - c2 <= 1e-10 * c or np.linalg.norm(step) < 1e-10
        c = c2
        if done:
            break
    return R, t


def estimate_relative_pose(x1, x2, cfg=None):
    """Robust relative pose from normalized correspondences.

    Returns the pose of view 2 relative to view 1 (``x2 ~ R x1 + t``).
    A two-point rotation-only model is tried first; when it explains at
    least half of the correspondences the motion is treated as a pure
    rotation and the translation direction is flagged unreliable. Otherwise
    the essential matrix is estimated by RANSAC, refined on its inliers and
    decomposed; the translation is also flagged unreliable when the median
    rotation-compensated parallax of the inliers is below
    ``cfg.parallax_reliable``.
    """
    cfg = cfg or RansacConfig()
    x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=float).reshape(-1, 2)
    n = len(x1)
    if n < 8:
        raise DegenerateConfiguration(f"need at least 8 correspondences, got {n}")
    b1, b2 = bearings(x1), bearings(x2)

    R_rot, rot_inl = _ransac_rotation(b1, b2, cfg)
    if R_rot is not None and rot_inl.mean() >= 0.5:
        n_inl = int(rot_inl.sum())
        parallax = float(np.median(angle_between(b1[rot_inl] @ R_rot.T, b2[rot_inl])))
        direction = np.array([0.0, 0.0, 1.0])
        try:
            E, inl = _ransac_essential(x1[rot_inl], x2[rot_inl], cfg)
            cands, win = decompose_essential(E, x1[rot_inl][inl], x2[rot_inl][inl])
            direction = cands[win][1]
        except (DegenerateConfiguration, CheiralityTie):
            pass
        return RelativePose(R_rot, direction, n_inl, float(n_inl), False, parallax, rot_inl)

    E, inl = _ransac_essential(x1, x2, cfg)
    if inl.sum() < 8:
        raise InsufficientInliers(f"{int(inl.sum())} of {n} correspondences are inliers")
    cands, win = decompose_essential(E, x1[inl], x2[inl])
    R, t = cands[win]
    for _ in range(3):
        use = np.flatnonzero(inl)
        if len(use) > cfg.refine_points:
            use = use[np.linspace(0, len(use) - 1, cfg.refine_points).astype(int)]
        R, t = _refine_pose(R, t, x1[use], x2[use], cfg.threshold)
        new_inl = sampson_distance(essential_from_pose(R, t), x1, x2) <= cfg.threshold
        if np.array_equal(new_inl, inl) or new_inl.sum() < 8:
            break
        inl = new_inl
    n_inl = int(inl.sum())
    if n_inl < max(8, cfg.min_inlier_ratio * n):
        raise InsufficientInliers(f"{n_inl} of {n} correspondences are inliers")
    # the refined pose may have crossed to another cheirality branch
    cands, win = decompose_essential(essential_from_pose(R, t), x1[inl], x2[inl])
    R, t = cands[win]
    parallax = float(np.median(angle_between(b1[inl] @ R.T, b2[inl])))
    return RelativePose(R, t, n_inl, float(n_inl), parallax >= cfg.parallax_reliable, parallax, inl)


# ---------------------------------------------------------------------------
# Triangulation


def triangulate_many(rotations, centers, obs, parallax_min=np.deg2rad(1.0)):
    """Batched linear triangulation.

    Args:
        rotations: (P, k, 3, 3) world-to-camera rotations per point and view.
        centers: (P, k, 3) camera centres.
        obs: (P, k, 2) normalized observations.
        parallax_min: minimum over-all-pairs ray angle.

    Returns:
        ``(X, status)`` with X (P, 3) and status codes TRI_OK /
        TRI_LOW_PARALLAX / TRI_BEHIND per point.
    """
    rotations = np.asarray(rotations, dtype=float)
    centers = np.asarray(centers, dtype=float)
    obs = np.asarray(obs, dtype=float)
    P, k = obs.shape[:2]
    # world-frame rays and their widest pairwise angle
    rays = np.matmul(bearings(obs)[:, :, None, :], rotations)[:, :, 0, :]
    cos = np.matmul(rays, np.swapaxes(rays, 1, 2))
    max_angle = np.arccos(np.clip(cos.reshape(P, -1).min(axis=1), -1.0, 1.0))

    # work relative to the first centre for conditioning
    origin = centers[:, 0, :]
    Cr = centers - origin[:, None, :]
    t = -np.matmul(rotations, Cr[..., None])[..., 0]
    Pm = np.concatenate([rotations, t[..., None]], axis=-1)  # (P, k, 3, 4)
    rows_u = obs[..., 0:1] * Pm[..., 2, :] - Pm[..., 0, :]
    rows_v = obs[..., 1:2] * Pm[..., 2, :] - Pm[..., 1, :]
    A = np.stack([rows_u, rows_v], axis=2).reshape(P, 2 * k, 4)
    A = A / np.maximum(np.linalg.norm(A, axis=-1, keepdims=True), 1e-300)
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    Xh = Vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
    depth = np.sum(rotations[..., 2, :] * (X[:, None, :] - Cr), axis=-1)
    X = X + origin
    status = np.full(P, TRI_OK)
    behind = ~np.all(depth > 0, axis=1) | ~np.all(np.isfinite(X), axis=1)
    status[behind] = TRI_BEHIND
    status[max_angle < parallax_min] = TRI_LOW_PARALLAX
    return X, status


def triangulate_linear(poses, obs, parallax_min=np.deg2rad(1.0)):
    """DLT triangulation of one point from two or more views.

    Args:
        poses: sequence of ``(R, C)``.
        obs: sequence of normalized 2D observations, one per pose.
    """
    if len(poses) < 2 or len(poses) != len(obs):
        raise ValueError("need >= 2 views with one observation each")
    R = np.array([p[0] for p in poses])[None]
    C = np.array([p[1] for p in poses], dtype=float)[None]
    X, status = triangulate_many(R, C, np.asarray(obs, dtype=float)[None], parallax_min)
    if status[0] == TRI_LOW_PARALLAX:
        raise LowParallax("rays are nearly parallel")
    if status[0] == TRI_BEHIND:
        raise BehindCamera("triangulated point is behind a camera")
    return X[0]


def triangulate_tracks(poses, observations, parallax_min=np.deg2rad(1.0)):
    """Triangulate many points with varying numbers of views.

    Args:
        poses: dict camera key -> ``(R, C)``.
        observations: dict point key -> list of ``(camera key, xy normalized)``.

    Returns:
        dict point key -> (X, status); points with fewer than two views are
        omitted.
    """
    groups = {}
    for pid, views in observations.items():
        if len(views) >= 2:
            groups.setdefault(len(views), []).append(pid)
    out = {}
    for k, pids in groups.items():
        R = np.empty((len(pids), k, 3, 3))
        C = np.empty((len(pids), k, 3))
        x = np.empty((len(pids), k, 2))
        for p, pid in enumerate(pids):
            for v, (cam, xy) in enumerate(observations[pid]):
                R[p, v], C[p, v] = poses[cam]
                x[p, v] = xy
        X, status = triangulate_many(R, C, x, parallax_min)
        for p, pid in enumerate(pids):
            out[pid] = (X[p], int(status[p]))
    return out


def triangulate_observations(cam_R, cam_C, cam_idx, pt_ids, x, parallax_min=np.deg2rad(1.0)):
    """Triangulate from flat observation arrays.

    Args:
        cam_R, cam_C: (M, 3, 3) rotations and (M, 3) centres.
        cam_idx: (O,) camera row of each observation.
        pt_ids: (O,) point id of each observation.
        x: (O, 2) normalized observations.

    Returns:
        ``(ids, X, status)`` for every id with at least two observations,
        ids ascending.
    """
    cam_idx = np.asarray(cam_idx, dtype=np.int64)
    pt_ids = np.asarray(pt_ids, dtype=np.int64)
    order = np.argsort(pt_ids, kind="stable")
    ids, start, counts = np.unique(pt_ids[order], return_index=True, return_counts=True)
    keep = counts >= 2
    ids, start, counts = ids[keep], start[keep], counts[keep]
    X = np.zeros((len(ids), 3))
    status = np.zeros(len(ids), dtype=int)
    for k in np.unique(counts):
        sel = np.flatnonzero(counts == k)
        rows = order[start[sel][:, None] + np.arange(k)]
        c = cam_idx[rows]
        X[sel], status[sel] = triangulate_many(cam_R[c], cam_C[c], x[rows], parallax_min)
    return ids, X, status


# ---------------------------------------------------------------------------
# Similarity alignment


def umeyama_similarity(src, dst, allow_collinear=False):
    """Least-squares similarity ``dst ~ s * R @ src + t``.

    Raises DegenerateSet when the source points are coincident or collinear.
    With ``allow_collinear`` a collinear set is accepted: the rotation about
    the line is then arbitrary, but the returned similarity still minimizes
    the residual (useful for straight trajectories).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (N, 3)")
    if len(src) < 3:
        raise DegenerateSet("need at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    n = len(src)
    var_s = np.sum(ds**2) / n
    spread = np.linalg.svd(ds, compute_uv=False)
    if var_s <= 0 or (spread[1] < 1e-12 * spread[0] and not allow_collinear):
        raise DegenerateSet("source points are coincident or collinear")
    Sigma = dd.T @ ds / n
    U, D, Vt = np.linalg.svd(Sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def apply_similarity(sim, X):
    s, R, t = sim
    return s * np.asarray(X, dtype=float) @ R.T + t
