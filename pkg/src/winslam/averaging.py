"""Motion averaging: global rotations and positions from pairwise epipolar geometry.

Nothing here looks at 3D structure. Rotations are averaged first with a
Huber-reweighted Lie-algebra least squares; positions follow from the
translation directions (and optional camera-to-point directions), first by
a linear cross-product system and then by robust Levenberg-Marquardt on
chordal distances between unit vectors.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import Disconnected, Underconstrained
from .geometry import bearings, so3_exp, so3_log

log = logging.getLogger(__name__)


@dataclass
class AveragingEdge:
    """Pairwise measurement ``R_ij ~ R_j R_i^T`` and ``t_ij ~ R_j (C_i - C_j)``."""

    i: int
    j: int
    rotation: np.ndarray
    direction: np.ndarray = None
    reliable: bool = True
    weight: float = 1.0


@dataclass
class PointConstraint:
    """Unit world-frame direction from camera ``node`` toward track ``point``."""

    node: int
    point: int
    direction: np.ndarray


@dataclass
class AveragingProblem:
    nodes: list
    edges: list
    point_constraints: list = field(default_factory=list)


@dataclass
class AveragingConfig:
    rot_huber: float = 0.1
    rot_max_iters: int = 100
    rot_tol: float = 1e-8
    rot_init_trees: int = 8
    trans_huber: float = 0.01
    trans_max_iters: int = 100
    point_weight: float = 0.5
    k_tracks: int = 50
    min_track_views: int = 3
    nullity_rtol: float = 1e-7
    seed: int = 0


@dataclass
class RotationEstimateSet:
    rotations: dict
    residuals: dict
    objective: float
    history: list
    iterations: int
    converged: bool


@dataclass
class PositionEstimateSet:
    positions: dict
    points: dict
    objective: float
    history: list
    nullity: int
    iterations: int


def huber_cost(e, delta):
    """Huber penalty on non-negative residual magnitudes."""
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, 0.5 * e**2, delta * (e - 0.5 * delta))


def huber_weight(e, delta):
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


# ---------------------------------------------------------------------------
# Graph helpers


def _components(nodes, pairs):
    parent = {n: n for n in nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri
    groups = {}
    for n in nodes:
        groups.setdefault(find(n), []).append(n)
    return sorted(groups.values(), key=lambda g: min(g))


def is_connected(nodes, pairs):
    return len(_components(nodes, pairs)) <= 1


def _spanning_tree(nodes, edges, keys):
    """Kruskal on ascending ``keys``; returns edge indices."""
    parent = {n: n for n in nodes}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = []
    for k in np.argsort(keys, kind="stable"):
        e = edges[k]
        ri, rj = find(e.i), find(e.j)
        if ri != rj:
            parent[rj] = ri
            tree.append(int(k))
    return tree


def _propagate(nodes, edges, tree, root):
    adj = {n: [] for n in nodes}
    for k in tree:
        adj[edges[k].i].append(k)
        adj[edges[k].j].append(k)
    R = {root: np.eye(3)}
    stack = [root]
    while stack:
        a = stack.pop()
        for k in adj[a]:
            e = edges[k]
            if e.i == a and e.j not in R:
                R[e.j] = e.rotation @ R[a]
                stack.append(e.j)
            elif e.j == a and e.i not in R:
                R[e.i] = e.rotation.T @ R[a]
                stack.append(e.i)
    return R


# ---------------------------------------------------------------------------
# Rotations


def _rotation_residuals(R, idx_i, idx_j, Rij):
    """Residual rotation vectors log(R_ij R_i R_j^T), one per edge."""
    M = Rij @ R[idx_i] @ np.swapaxes(R[idx_j], 1, 2)
    return so3_log(M)


def average_rotations(problem, cfg=None):
    """Global rotations minimizing the Huber-robust sum of geodesic errors.

    The first node of ``problem.nodes`` is the gauge and stays exactly at
    the identity.
    """
    cfg = cfg or AveragingConfig()
    nodes = list(problem.nodes)
    edges = list(problem.edges)
    if not is_connected(nodes, [(e.i, e.j) for e in edges]):
        raise Disconnected("rotation graph is not connected")
    pos = {n: k for k, n in enumerate(nodes)}
    N = len(nodes)
    if N == 1:
        return RotationEstimateSet({nodes[0]: np.eye(3)}, {}, 0.0, [0.0], 0, True)
    idx_i = np.array([pos[e.i] for e in edges])
    idx_j = np.array([pos[e.j] for e in edges])
    Rij = np.array([e.rotation for e in edges])
    delta = cfg.rot_huber

    def objective(R):
        ang = np.linalg.norm(_rotation_residuals(R, idx_i, idx_j, Rij), axis=1)
        return float(huber_cost(ang, delta).sum())

    # spanning-tree initialization: the heaviest tree plus a few random ones
    rng = np.random.default_rng(cfg.seed)
    weights = np.array([e.weight for e in edges], dtype=float)
    key_sets = [-weights] + [rng.random(len(edges)) for _ in range(cfg.rot_init_trees)]
    best = None
    for keys in key_sets:
        Rd = _propagate(nodes, edges, _spanning_tree(nodes, edges, keys), nodes[0])
        R0 = np.array([Rd[n] for n in nodes])
        f0 = objective(R0)
        if best is None or f0 < best[0]:
            best = (f0, R0)
    f, R = best
    history = [f]
    converged = False
    it = 0
    for it in range(1, cfg.rot_max_iters + 1):
        res = _rotation_residuals(R, idx_i, idx_j, Rij)
        w = huber_weight(np.linalg.norm(res, axis=1), delta)
        # residual after update ~ res + R_j (w_i - w_j); solve in the
        # rotated frame: || R_j^T res + w_i - w_j ||^2
        rhs = -np.einsum("kji,kj->ki", R[idx_j], res)
        H = np.zeros((3 * N, 3 * N))
        g = np.zeros(3 * N)
        for k in range(len(edges)):
            a, b, wk = idx_i[k], idx_j[k], w[k]
            sa, sb = slice(3 * a, 3 * a + 3), slice(3 * b, 3 * b + 3)
            H[sa, sa] += wk * np.eye(3)
            H[sb, sb] += wk * np.eye(3)
            H[sa, sb] -= wk * np.eye(3)
            H[sb, sa] -= wk * np.eye(3)
            g[sa] += wk * rhs[k]
            g[sb] -= wk * rhs[k]
        omega = np.zeros(3 * N)
        omega[3:] = np.linalg.solve(H[3:, 3:], g[3:])
        omega = omega.reshape(N, 3)
        step = 1.0
        while True:
            R_new = R @ so3_exp(step * omega)
            f_new = objective(R_new)
            if f_new <= f or step < 1e-6:
                break
            step *= 0.5
        if f_new > f:
            converged = True
            break
        R, f = R_new, f_new
        history.append(f)
        if np.max(np.linalg.norm(step * omega, axis=1)) < cfg.rot_tol:
            converged = True
            break
    R[0] = np.eye(3)
    if not converged:
        log.warning("rotation averaging stopped after %d iterations", it)
    res = np.linalg.norm(_rotation_residuals(R, idx_i, idx_j, Rij), axis=1)
    residuals = {(e.i, e.j): float(r) for e, r in zip(edges, res)}
    return RotationEstimateSet({n: R[k] for n, k in pos.items()}, residuals, f, history, it, converged)


# ---------------------------------------------------------------------------
# Translations


def build_camera_point_constraints(keyframes, rotations, intr, cfg=None):
    """Camera-to-point directions from the longest tracks of a window.

    Only tracks observed in at least ``cfg.min_track_views`` of the given
    keyframes qualify; the ``cfg.k_tracks`` longest are used. Each
    observation becomes a unit direction rotated into the global frame.
    No depth is involved.
    """
    cfg = cfg or AveragingConfig()
    if cfg.k_tracks <= 0:
        return []
    kfs = [kf for kf in keyframes if kf.kf_id in rotations]
    if not kfs:
        return []
    tid = np.concatenate([kf.track_ids for kf in kfs]).astype(np.int64)
    kid = np.concatenate([np.full(len(kf.track_ids), kf.kf_id) for kf in kfs])
    px = np.concatenate([kf.pixels for kf in kfs]).reshape(-1, 2)
    ids, counts = np.unique(tid, return_counts=True)
    ok = counts >= cfg.min_track_views
    # longest tracks first, ties by id
    order = np.lexsort((ids[ok], -counts[ok]))
    chosen = ids[ok][order][: cfg.k_tracks]
    rank = {int(t): r for r, t in enumerate(chosen)}
    rows = np.flatnonzero(np.isin(tid, chosen))
    rows = rows[np.lexsort((kid[rows], [rank[int(t)] for t in tid[rows]]))] if len(rows) else rows
    b = bearings(intr.normalize(px[rows]))
    out = []
    for r, d in zip(rows, b):
        k = int(kid[r])
        out.append(PointConstraint(k, int(tid[r]), rotations[k].T @ d))
    return out


class _TranslationSystem:
    """Index bookkeeping shared by the linear and nonlinear stages."""

    def __init__(self, problem, rotations, point_weight):
        self.nodes = list(problem.nodes)
        self.pos = {n: k for k, n in enumerate(self.nodes)}
        self.cc = []
        for e in problem.edges:
            if e.reliable and e.direction is not None:
                u = rotations[e.j].T @ np.asarray(e.direction, dtype=float)
                self.cc.append((self.pos[e.i], self.pos[e.j], u / np.linalg.norm(u)))
        pids = sorted({c.point for c in problem.point_constraints})
        self.point_ids = pids
        ppos = {p: len(self.nodes) + k for k, p in enumerate(pids)}
        self.cp = [
            (self.pos[c.node], ppos[c.point], c.direction / np.linalg.norm(c.direction))
            for c in problem.point_constraints
            if c.node in self.pos
        ]
        self.point_weight = point_weight
        self.n_vars = len(self.nodes) + len(pids)

    def linear_matrix(self):
        """Rows ``[u]x (a - b) = 0`` for every direction constraint ``u ~ a - b``."""
        rows = []
        for a, b, u, w in self._terms():
            S = np.zeros((3, 3 * self.n_vars))
            K = np.sqrt(w) * np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
            S[:, 3 * a : 3 * a + 3] = K
            S[:, 3 * b : 3 * b + 3] = -K
            rows.append(S)
        return np.vstack(rows) if rows else np.zeros((0, 3 * self.n_vars))

    def _terms(self):
        """(head, tail, direction, weight): direction ~ var[head] - var[tail]."""
        for i, j, u in self.cc:
            yield i, j, u, 1.0
        for c, p, d in self.cp:
            yield p, c, d, self.point_weight


def _nullity(A, n_vars, rtol):
    """Null-space dimension of A, counting the 3 translation gauge directions."""
    if A.shape[0] == 0:
        return 3 * n_vars
    # fix variable 0 at the origin; remaining nullity plus 3 gauge dims
    Ar = A[:, 3:]
    sv = np.linalg.svd(Ar, compute_uv=False)
    full = np.zeros(Ar.shape[1])
    full[: len(sv)] = sv
    if sv.size == 0 or sv[0] == 0:
        return 3 * n_vars
    return 3 + int(np.sum(full < rtol * sv[0]))


def translation_nullity(problem, rotations, cfg=None):
    cfg = cfg or AveragingConfig()
    sysm = _TranslationSystem(problem, rotations, cfg.point_weight)
    return _nullity(sysm.linear_matrix(), sysm.n_vars, cfg.nullity_rtol)


def _normalize_gauge(Z, n_cam):
    Z = Z - Z[0]
    C = Z[:n_cam]
    d = np.linalg.norm(C[:, None] - C[None], axis=-1)
    mean = d[np.triu_indices(n_cam, 1)].mean() if n_cam > 1 else 1.0
    return Z / mean


def average_translations(problem, rotations, cfg=None):
    """Global camera positions from translation directions.

    Stage 1 solves the homogeneous cross-product system with the first
    camera at the origin; stage 2 refines the Huber-robust chordal
    objective by Levenberg-Marquardt. Camera-point constraints enter as
    extra direction residuals toward point pseudo-nodes. The result is
    gauge-normalized: first camera at the origin, mean inter-camera
    distance 1.
    """
    cfg = cfg or AveragingConfig()
    if isinstance(rotations, RotationEstimateSet):
        rotations = rotations.rotations
    sysm = _TranslationSystem(problem, rotations, cfg.point_weight)
    n_cam = len(sysm.nodes)
    if n_cam < 2:
        raise Underconstrained("need at least two cameras", nullity=None)
    constrained = {a for a, _, _, _ in sysm._terms()} | {b for _, b, _, _ in sysm._terms()}
    missing = [sysm.nodes[k] for k in range(n_cam) if k not in constrained]
    A = sysm.linear_matrix()
    nullity = _nullity(A, sysm.n_vars, cfg.nullity_rtol)
    if missing and len(missing) < n_cam:
        raise Disconnected(f"cameras {missing} carry no translation constraint")
    if nullity > 4:
        raise Underconstrained(f"translation null space has dimension {nullity}", nullity=nullity)

    _, _, Vt = np.linalg.svd(A[:, 3:], full_matrices=False)
    Z = np.concatenate([np.zeros(3), Vt[-1]]).reshape(-1, 3)
    # pick the sign that points most constraints the right way
    agree = sum(w * u @ (Z[a] - Z[b]) for a, b, u, w in sysm._terms())
    if agree < 0:
        Z = -Z
    Z = _normalize_gauge(Z, n_cam)
    Z, f, history, iters = _refine_translations(sysm, Z, cfg)
    Z = _normalize_gauge(Z, n_cam)
    positions = {n: Z[k].copy() for k, n in enumerate(sysm.nodes)}
    points = {p: Z[n_cam + k].copy() for k, p in enumerate(sysm.point_ids)}
    return PositionEstimateSet(positions, points, f, history, nullity, iters)


def _chordal_terms(sysm):
    terms = list(sysm._terms())
    head = np.array([t[0] for t in terms], dtype=int)
    tail = np.array([t[1] for t in terms], dtype=int)
    U = np.array([t[2] for t in terms]).reshape(-1, 3)
    W = np.array([t[3] for t in terms], dtype=float)
    return head, tail, U, W


def chordal_objective(Z, head, tail, U, W, delta):
    v = Z[head] - Z[tail]
    n = v / np.linalg.norm(v, axis=1, keepdims=True)
    e = np.linalg.norm(U - n, axis=1)
    return float(np.sum(W * huber_cost(e, delta)))


def _refine_translations(sysm, Z, cfg):
    head, tail, U, W = _chordal_terms(sysm)
    delta = cfg.trans_huber
    nv = sysm.n_vars
    f = chordal_objective(Z, head, tail, U, W, delta)
    history = [f]
    lam = 1e-4
    it = 0
    for it in range(1, cfg.trans_max_iters + 1):
        v = Z[head] - Z[tail]
        norm = np.linalg.norm(v, axis=1)
        n = v / norm[:, None]
        r = U - n
        e = np.linalg.norm(r, axis=1)
        sw = np.sqrt(W * huber_weight(e, delta))
        # d r / d head = -(I - n n^T) / |v|
        P = (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / norm[:, None, None]
        J = np.zeros((len(head), 3, 3 * nv))
        for k in range(len(head)):
            J[k, :, 3 * head[k] : 3 * head[k] + 3] = -P[k]
            J[k, :, 3 * tail[k] : 3 * tail[k] + 3] = P[k]
        J = (J * sw[:, None, None]).reshape(-1, 3 * nv)[:, 3:]
        rw = (r * sw[:, None]).ravel()
        H = J.T @ J
        g = J.T @ rw
        accepted = False
        while lam < 1e12:
            A = H + lam * (np.diag(np.diag(H)) + 1e-12 * np.eye(len(H)))
            step = -np.linalg.solve(A, g)
            Z_new = Z.copy()
            Z_new[1:] += step.reshape(-1, 3)
            f_new = chordal_objective(Z_new, head, tail, U, W, delta)
            if f_new < f:
                accepted = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted:
            break
        rel = (f - f_new) / max(f, 1e-300)
        Z, f = Z_new, f_new
        history.append(f)
        if rel < 1e-12 or f < 1e-30:
            break
    return Z, f, history, it
