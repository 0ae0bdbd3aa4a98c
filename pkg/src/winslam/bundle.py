"""Structure initialization, windowed bundle adjustment and map merging.

The reprojection residual of an observation ``x`` (pixels) of point ``X`` in
camera ``(R, C)`` is

    pp + (x - pp) * (1 + r |x - pp|^2 / f^2)  -  (pp + f * q[:2] / q[2]),
    q = R (X - C),

i.e. the radial correction is applied to the measurement and compared with
the ideal pinhole projection. Focal length ``f`` and distortion ``r`` are
shared by all cameras of a problem.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateSet,
    NoAnchors,
    NoTriangulablePoints,
    SingularNormalEquations,
)
from .geometry import (
    TRI_OK,
    CameraIntrinsics,
    so3_exp,
    triangulate_observations,
    umeyama_similarity,
)

log = logging.getLogger(__name__)


@dataclass
class BaConfig:
    max_iters: int = 100
    ftol: float = 1e-10
    xtol: float = 1e-12
    huber: float = 2.0
    damping_init: float = 1e-4
    refine_intrinsics: bool = True
    # observations with a larger final residual are dropped from the window
    outlier_px: float = 8.0
    # focal and distortion are only refined when their marginal standard
    # deviation, for intrinsics_sigma_px of image noise, is below these
    focal_max_std: float = 0.005  # relative to focal
    distortion_max_std: float = 0.01
    intrinsics_sigma_px: float = 1.0

    def __post_init__(self):
        for name in ("max_iters", "ftol", "xtol", "huber", "damping_init", "outlier_px", "focal_max_std",
                     "distortion_max_std", "intrinsics_sigma_px"):
            if not getattr(self, name) > 0:
                raise ValueError(f"BaConfig.{name} must be positive")


# camera/point coupling blocks up to this many entries are stored densely
DENSE_LIMIT = 16_000_000
# larger reduced camera systems are solved iteratively
ITERATIVE_MIN_PARAMS = 1000
CG_RTOL = 1e-8
CG_MAX_ITERS = 1000


def robust_cost(res, delta):
    """Sum of Huber penalties on per-observation residual norms."""
    e = np.linalg.norm(res, axis=-1)
    return float(np.sum(np.where(e <= delta, 0.5 * e**2, delta * (e - 0.5 * delta))))


# ---------------------------------------------------------------------------
# Least-squares core


@dataclass
class BaState:
    R: np.ndarray  # (M, 3, 3)
    C: np.ndarray  # (M, 3)
    X: np.ndarray  # (P, 3)
    f: float
    r: float


@dataclass
class BaResult:
    state: BaState
    cost: float
    initial_cost: float
    history: list
    iterations: int
    converged: bool
    residuals: np.ndarray


def _tangent_basis(v):
    n = v / np.linalg.norm(v)
    a = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return np.column_stack([u, np.cross(n, u)])


class BundleProblem:
    """Reprojection problem over cameras, shared intrinsics and points.

    Camera ``fixed_cam`` is frozen. Camera ``scale_cam`` keeps its distance
    to the frozen camera (it moves on a sphere), which fixes the scale.
    Updates are left-multiplicative on rotations and additive elsewhere.
    """

    def __init__(self, state, pp, cam_idx, pt_idx, px, fixed_cam=0, scale_cam=None,
                 refine_intrinsics=True, huber=2.0):
        self.state = state
        self.pp = np.asarray(pp, dtype=float)
        self.cam_idx = np.asarray(cam_idx, dtype=int)
        self.pt_idx = np.asarray(pt_idx, dtype=int)
        self.px = np.asarray(px, dtype=float)
        self.huber = huber
        self.fixed_cam = fixed_cam
        M = len(state.C)
        P = len(state.X)
        if scale_cam is None:
            d = np.linalg.norm(state.C - state.C[fixed_cam], axis=1)
            scale_cam = int(np.argmax(d)) if M > 1 else None
        self.scale_cam = scale_cam
        cols = np.full((M, 6), -1, dtype=int)
        c = 0
        for m in range(M):
            if m == fixed_cam:
                continue
            k = 5 if m == scale_cam else 6
            cols[m, :k] = np.arange(c, c + k)
            c += k
        self.intr_cols = np.array([c, c + 1]) if refine_intrinsics else np.array([-1, -1])
        if refine_intrinsics:
            c += 2
        self.n_cam_params = c
        self.cam_cols = cols
        self.n_points = P
        self.obs_cols = np.concatenate([cols[self.cam_idx], np.tile(self.intr_cols, (len(self.cam_idx), 1))], axis=1)
        # per-camera grouping used to assemble the camera block
        self._cam_order = np.argsort(self.cam_idx, kind="stable")
        present, starts = np.unique(self.cam_idx[self._cam_order], return_index=True)
        self._cam_present = present
        self._cam_starts = starts if len(starts) else np.zeros(1, int)
        full = np.concatenate([cols, np.tile(self.intr_cols, (M, 1))], axis=1)
        self._cam_maps = {m: (np.flatnonzero(full[m] >= 0), full[m][full[m] >= 0]) for m in present}
        pair = self.cam_idx.astype(np.int64) * max(P, 1) + self.pt_idx
        self._unique_pairs = len(np.unique(pair)) == len(pair)

    # -- model ---------------------------------------------------------------

    def residuals(self, state=None):
        s = self.state if state is None else state
        d = self.px - self.pp
        corrected = self.pp + d * (1.0 + s.r * np.sum(d * d, axis=1, keepdims=True) / s.f**2)
        q = np.matmul(s.R[self.cam_idx], (s.X[self.pt_idx] - s.C[self.cam_idx])[:, :, None])[:, :, 0]
        return corrected - (self.pp + s.f * q[:, :2] / q[:, 2:3])

    def depths(self, state=None):
        s = self.state if state is None else state
        q = np.einsum("oj,oj->o", s.R[self.cam_idx][:, 2, :], s.X[self.pt_idx] - s.C[self.cam_idx])
        return q

    def jacobians(self, state=None):
        """Per-observation blocks: camera-side (O, 2, 8) and point (O, 2, 3)."""
        s = self.state if state is None else state
        R = s.R[self.cam_idx]
        q = np.matmul(R, (s.X[self.pt_idx] - s.C[self.cam_idx])[:, :, None])[:, :, 0]
        z = q[:, 2]
        u = q[:, :2] / z[:, None]
        O = len(q)
        # d prediction / d q
        dp = np.zeros((O, 2, 3))
        dp[:, 0, 0] = s.f / z
        dp[:, 1, 1] = s.f / z
        dp[:, :, 2] = -s.f * u / z[:, None]
        Jc = np.zeros((O, 2, 8))
        # residual = corrected - prediction, so pose/point blocks are negated
        Jc[:, :, 0:3] = np.matmul(dp, _skew_batch(q))  # -dp @ (-[q]x)
        dC = np.matmul(dp, R)  # -dp @ (-R)
        Jc[:, :, 3:6] = dC
        if self.scale_cam is not None:
            B = _tangent_basis(s.C[self.scale_cam] - s.C[self.fixed_cam])
            on = self.cam_idx == self.scale_cam
            Jc[on, :, 3:5] = dC[on] @ B
            Jc[on, :, 5] = 0.0
        d = self.px - self.pp
        rho2 = np.sum(d * d, axis=1)
        Jc[:, :, 6] = d * (s.r * rho2 * -2.0 / s.f**3)[:, None] - u
        Jc[:, :, 7] = d * (rho2 / s.f**2)[:, None]
        Jp = -np.matmul(dp, R)
        return Jc, Jp

    def apply(self, step_cam, step_pts, state=None):
        s = self.state if state is None else state
        M = len(s.C)
        R = s.R.copy()
        C = s.C.copy()
        for m in range(M):
            cols = self.cam_cols[m]
            if cols[0] < 0:
                continue
            R[m] = so3_exp(step_cam[cols[:3]]) @ s.R[m]
            if m == self.scale_cam:
                v = s.C[m] - s.C[self.fixed_cam]
                rho = np.linalg.norm(v)
                w = v + _tangent_basis(v) @ step_cam[cols[3:5]]
                C[m] = s.C[self.fixed_cam] + rho * w / np.linalg.norm(w)
            else:
                C[m] = s.C[m] + step_cam[cols[3:6]]
        f, r = s.f, s.r
        if self.intr_cols[0] >= 0:
            f = s.f + step_cam[self.intr_cols[0]]
            r = s.r + step_cam[self.intr_cols[1]]
        X = s.X + step_pts.reshape(-1, 3)
        return BaState(R, C, X, f, r)

    def dense_jacobian(self, state=None):
        """Full (2O, n_cam_params + 3P) Jacobian, for checks on small problems."""
        Jc, Jp = self.jacobians(state)
        O = len(Jc)
        n = self.n_cam_params + 3 * self.n_points
        J = np.zeros((2 * O, n))
        for o in range(O):
            for k, col in enumerate(self.obs_cols[o]):
                if col >= 0:
                    J[2 * o : 2 * o + 2, col] += Jc[o, :, k]
            p = self.pt_idx[o]
            base = self.n_cam_params + 3 * p
            J[2 * o : 2 * o + 2, base : base + 3] = Jp[o]
        return J

    def split_step(self, x):
        return x[: self.n_cam_params], x[self.n_cam_params :]

    # -- normal equations ----------------------------------------------------

    def normal_equations(self, state=None):
        s = self.state if state is None else state
        res = self.residuals(s)
        Jc, Jp = self.jacobians(s)
        e = np.linalg.norm(res, axis=1)
        w = np.where(e <= self.huber, 1.0, self.huber / np.maximum(e, 1e-300))
        sw = np.sqrt(w)
        res = res * sw[:, None]
        Jc = Jc * sw[:, None, None]
        Jp = Jp * sw[:, None, None]
        nc = self.n_cam_params
        P = self.n_points
        # camera block U and gradient, summed per camera then scattered
        Js = Jc[self._cam_order].reshape(-1, Jc.shape[2])
        rs = res[self._cam_order].ravel()
        bounds = np.append(2 * self._cam_starts, len(rs))
        U = np.zeros((nc, nc))
        gc = np.zeros(nc)
        for k, m in enumerate(self._cam_present):
            loc, glob = self._cam_maps[m]
            J = Js[bounds[k] : bounds[k + 1]][:, loc]
            U[np.ix_(glob, glob)] += J.T @ J
            gc[glob] += J.T @ rs[bounds[k] : bounds[k + 1]]
        # point blocks
        JpJp = np.matmul(Jp.transpose(0, 2, 1), Jp).reshape(-1, 9)
        V = np.stack([np.bincount(self.pt_idx, JpJp[:, k], minlength=P) for k in range(9)], axis=1).reshape(P, 3, 3)
        Jpr = np.matmul(res[:, None, :], Jp)[:, 0, :]
        gp = np.stack([np.bincount(self.pt_idx, Jpr[:, k], minlength=P) for k in range(3)], axis=1)
        # coupling block W (nc x 3P)
        Wo = np.matmul(Jc.transpose(0, 2, 1), Jp)  # (O, 8, 3)
        cols = self.obs_cols
        valid = cols >= 0
        if nc * 3 * P <= DENSE_LIMIT and self._unique_pairs:
            W = np.zeros((nc, P, 3))
            cam_part = valid[:, :6]
            o, k = np.nonzero(cam_part)
            W[cols[o, k], self.pt_idx[o]] = Wo[o, k]
            for k in (6, 7):
                if self.intr_cols[k - 6] >= 0:
                    W[self.intr_cols[k - 6]] = np.stack(
                        [np.bincount(self.pt_idx, Wo[:, k, j], minlength=P) for j in range(3)], axis=1
                    )
            W = W.reshape(nc, 3 * P)
        else:
            safe = np.where(valid, cols, 0)
            rows = np.broadcast_to(safe[:, :, None], Wo.shape)
            colsW = np.broadcast_to(3 * self.pt_idx[:, None, None] + np.arange(3)[None, None, :], Wo.shape)
            m3 = np.broadcast_to(valid[:, :, None], Wo.shape)
            W = sp.csc_matrix((Wo[m3], (rows[m3], colsW[m3])), shape=(nc, 3 * P))
            if nc * 3 * P <= DENSE_LIMIT:
                W = W.toarray()
        return U, W, V, gc, gp.ravel()

    def _damped(self, U, V, lam):
        nc = self.n_cam_params
        dU = np.diag(U).copy()
        if nc and np.any(dU <= 0):
            raise SingularNormalEquations("a camera parameter has no observations")
        Ud = U + lam * np.diag(dU)
        Vd = V + lam * np.einsum("pii->pi", V)[:, :, None] * np.eye(3)[None]
        try:
            Vinv = np.linalg.inv(Vd)
        except np.linalg.LinAlgError as err:
            raise SingularNormalEquations("singular point block") from err
        return Ud, Vinv

    def reduced_system(self, U, W, V, lam=0.0):
        """Damped Schur complement ``S`` of the camera block, and ``V^-1``."""
        nc = self.n_cam_params
        P = self.n_points
        Ud, Vinv = self._damped(U, V, lam)
        if isinstance(W, np.ndarray):
            WV = np.matmul(W.reshape(nc, P, 1, 3), Vinv[None]).reshape(nc, 3 * P)
            return Ud - WV @ W.T, Vinv
        bd = sp.block_diag(list(Vinv), format="csc") if P else sp.csc_matrix((0, 0))
        W = W.tocsc()
        WV = (W @ bd).tocsc()
        # dense products over column chunks; sparse-sparse products are slow here
        S = Ud.copy()
        step = max(3, DENSE_LIMIT // max(nc, 1) // 3 * 3)
        for a in range(0, 3 * P, step):
            S -= WV[:, a : a + step].toarray() @ W[:, a : a + step].toarray().T
        return S, Vinv

    def reduced_solver(self, U, W, V, lam=0.0):
        """``(solve, Vinv)`` where ``solve(b)`` returns ``S^-1 b`` for the damped Schur complement.

        Small systems are factored exactly. Systems with more than
        ITERATIVE_MIN_PARAMS camera parameters are solved by conjugate
        gradients preconditioned with the inverse diagonal blocks of S
        (one per camera plus one for the intrinsics), never forming S.
        """
        nc = self.n_cam_params
        P = self.n_points
        if isinstance(W, np.ndarray) or nc <= ITERATIVE_MIN_PARAMS:
            S, Vinv = self.reduced_system(U, W, V, lam)
            try:
                cf = scipy.linalg.cho_factor(S, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as err:
                raise SingularNormalEquations("reduced camera system is not positive definite") from err
            return (lambda b: scipy.linalg.cho_solve(cf, b)), Vinv
        Ud, Vinv = self._damped(U, V, lam)
        W = W.tocsr()
        bd = sp.block_diag(list(Vinv), format="csr")
        WV = (W @ bd).tocsr()
        blocks = [g for g in self.cam_cols if np.any(g >= 0)]
        blocks = [g[g >= 0] for g in blocks]
        if self.intr_cols[0] >= 0:
            blocks.append(self.intr_cols)
        rows, cols, vals = [], [], []
        for g in blocks:
            Sb = Ud[np.ix_(g, g)] - (WV[g] @ W[g].T).toarray()
            try:
                inv = np.linalg.inv(Sb)
            except np.linalg.LinAlgError as err:
                raise SingularNormalEquations("singular camera block") from err
            rows.append(np.repeat(g, len(g)))
            cols.append(np.tile(g, len(g)))
            vals.append(inv.ravel())
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nc, nc))
        WT = W.T.tocsr()

        def matvec(x):
            y = WT @ x
            return Ud @ x - W @ np.matmul(Vinv, y.reshape(P, 3, 1)).ravel()

        op = spla.LinearOperator((nc, nc), matvec=matvec, dtype=float)

        def solve(b):
            x, info = spla.cg(op, b, rtol=CG_RTOL, maxiter=CG_MAX_ITERS, M=M)
            if not np.all(np.isfinite(x)):
                raise SingularNormalEquations("conjugate gradients diverged")
            return x

        return solve, Vinv

    def intrinsics_std(self, sigma_px=1.0, state=None):
        """Marginal standard deviations of ``(f, r)`` under ``sigma_px`` image noise.

        Infinite when the intrinsics are not refined or the data do not
        determine them (pure translation leaves focal length free).
        """
        if self.intr_cols[0] < 0:
            return np.full(2, np.inf)
        U, W, V, _, _ = self.normal_equations(state)
        try:
            solve, _ = self.reduced_solver(U, W, V)
            var = np.empty(2)
            for k, c in enumerate(self.intr_cols):
                e = np.zeros(self.n_cam_params)
                e[c] = 1.0
                var[k] = solve(e)[c]
        except (SingularNormalEquations, np.linalg.LinAlgError, ValueError):
            return np.full(2, np.inf)
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            return np.full(2, np.inf)
        return sigma_px * np.sqrt(var)

    def solve_step(self, U, W, V, gc, gp, lam):
        P = self.n_points
        solve, Vinv = self.reduced_solver(U, W, V, lam)
        rhs = -gc + W @ np.matmul(Vinv, gp.reshape(P, 3, 1)).ravel()
        dc = solve(rhs)
        dp = np.matmul(Vinv, (-gp - W.T @ dc).reshape(P, 3, 1)).ravel()
        return dc, dp


def _skew_batch(q):
    S = np.zeros(q.shape + (3,))
    S[:, 0, 1] = -q[:, 2]
    S[:, 0, 2] = q[:, 1]
    S[:, 1, 0] = q[:, 2]
    S[:, 1, 2] = -q[:, 0]
    S[:, 2, 0] = -q[:, 1]
    S[:, 2, 1] = q[:, 0]
    return S


def levenberg_marquardt(problem, cfg=None):
    """Minimize the Huber-robust reprojection cost of a BundleProblem.

    A step is accepted only if it strictly lowers the robust cost, so the
    returned ``history`` is strictly decreasing.
    """
    cfg = cfg or BaConfig()
    state = problem.state
    cost = robust_cost(problem.residuals(state), problem.huber)
    initial = cost
    history = [cost]
    lam = cfg.damping_init
    converged = False
    it = 0
    while it < cfg.max_iters:
        if cost < 1e-30:
            converged = True
            break
        U, W, V, gc, gp = problem.normal_equations(state)
        gnorm = max(np.abs(gc).max(initial=0.0), np.abs(gp).max(initial=0.0))
        if gnorm < 1e-20:
            converged = True
            break
        it += 1
        accepted = False
        while lam < 1e16:
            try:
                dc, dp = problem.solve_step(U, W, V, gc, gp, lam)
            except SingularNormalEquations:
                if lam > 1e8:
                    raise
                lam *= 10
                continue
            trial = problem.apply(dc, dp, state)
            new_cost = robust_cost(problem.residuals(trial), problem.huber)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True
            break
        if new_cost > cost:  # defensive: accepted steps must descend
            raise AssertionError("accepted LM step increased the cost")
        step_norm = np.sqrt(np.sum(dc**2) + np.sum(dp**2))
        x_norm = np.sqrt(np.sum(state.C**2) + np.sum(state.X**2) + state.f**2)
        decrease = cost - new_cost
        state, cost = trial, new_cost
        history.append(cost)
        lam = max(lam / 10, 1e-12)
        if decrease <= cfg.ftol * cost or step_norm <= cfg.xtol * (x_norm + cfg.xtol):
            converged = True
            break
    if not converged:
        log.warning("bundle adjustment hit max_iters=%d", cfg.max_iters)
    return BaResult(state, cost, initial, history, it, converged, problem.residuals(state))


def intrinsics_observable(problem, cfg):
    """Whether the data pin down focal and distortion well enough to refine them."""
    std = problem.intrinsics_std(cfg.intrinsics_sigma_px)
    ok = std[0] <= cfg.focal_max_std * problem.state.f and std[1] <= cfg.distortion_max_std
    if not ok:
        log.info("intrinsics held fixed: std f=%.3g px, r=%.3g", std[0], std[1])
    return bool(ok)


def _gated_solve(make, state, cfg):
    """Run LM on ``make(refine_intrinsics, state)`` with observability gating.

    If focal and distortion look unobservable at the starting state, the
    problem is first solved with them frozen; the test is then repeated at
    that solution (a poor start inflates the uncertainty) and, if it passes,
    a second solve frees them. Returns ``(problem, result)``; the cost
    history of both stages is concatenated and stays strictly decreasing.
    """
    if not cfg.refine_intrinsics:
        problem = make(False, state)
        return problem, levenberg_marquardt(problem, cfg)
    problem = make(True, state)
    if intrinsics_observable(problem, cfg):
        return problem, levenberg_marquardt(problem, cfg)
    frozen = make(False, state)
    first = levenberg_marquardt(frozen, cfg)
    problem = make(True, first.state)
    if not intrinsics_observable(problem, cfg):
        return frozen, first
    second = levenberg_marquardt(problem, cfg)
    second.history = first.history + second.history[1:]
    second.initial_cost = first.initial_cost
    second.iterations += first.iterations
    return problem, second


# ---------------------------------------------------------------------------
# Window estimates


def _views_of(tid, obs_tid, obs_kf, obs_px):
    rows = np.flatnonzero(obs_tid == tid)
    return [(int(obs_kf[r]), obs_px[r]) for r in rows]


def _pair_keys(tid, kf):
    return np.asarray(tid, dtype=np.int64) * (1 << 24) + np.asarray(kf, dtype=np.int64)


@dataclass
class WindowEstimate:
    """Cameras, shared intrinsics and points of one temporal window.

    Observations are kept as flat arrays (track id, keyframe id, pixel) and
    cover every track seen at least twice in the window. Tracks that could
    not be triangulated are listed in ``deferred``; ``residuals`` holds the
    per-observation reprojection residual in pixels (NaN for deferred
    tracks).
    """

    window_id: int
    kf_ids: list
    frame_indices: dict
    timestamps: dict
    rotations: dict
    positions: dict
    intrinsics: CameraIntrinsics
    points: dict
    obs_tid: np.ndarray
    obs_kf: np.ndarray
    obs_px: np.ndarray
    deferred: set = field(default_factory=set)
    residuals: np.ndarray = None
    cost_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True

    def views(self, tid):
        return _views_of(tid, self.obs_tid, self.obs_kf, self.obs_px)

    @property
    def visibility(self):
        """Set of (track id, keyframe id) pairs with an observation of a point."""
        on = np.isin(self.obs_tid, np.fromiter(self.points, dtype=np.int64, count=len(self.points)))
        return set(zip(self.obs_tid[on].tolist(), self.obs_kf[on].tolist()))

    @property
    def rmse(self):
        if self.residuals is None:
            return float("nan")
        r = self.residuals[np.all(np.isfinite(self.residuals), axis=1)]
        return float(np.sqrt(np.mean(np.sum(r**2, axis=1)))) if len(r) else float("nan")

    def point_rmse(self, tid):
        r = self.residuals[self.obs_tid == tid]
        return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))


def _window_observations(keyframes):
    tid = np.concatenate([kf.track_ids for kf in keyframes]).astype(np.int64)
    kf = np.concatenate([np.full(len(k.track_ids), k.kf_id) for k in keyframes]).astype(np.int64)
    px = np.concatenate([k.pixels for k in keyframes]).reshape(-1, 2)
    ids, counts = np.unique(tid, return_counts=True)
    multi = np.isin(tid, ids[counts >= 2])
    order = np.lexsort((kf[multi], tid[multi]))
    return tid[multi][order], kf[multi][order], px[multi][order]


def _camera_rows(kf_ids, obs_kf):
    lut = np.full(max(kf_ids) + 1, -1, dtype=np.int64)
    lut[np.asarray(kf_ids)] = np.arange(len(kf_ids))
    return lut[obs_kf]


def initialize_structure(window, rotations, positions, intr, parallax_min=np.deg2rad(1.0)):
    """Triangulate every track seen in at least two keyframes of the window.

    Points failing the parallax floor or the depth test are stored as
    deferred, to be revisited when more views are available.
    """
    R = rotations if isinstance(rotations, dict) else rotations.rotations
    C = positions if isinstance(positions, dict) else positions.positions
    keyframes = [kf for kf in window.keyframes if kf.kf_id in C]
    kf_ids = [kf.kf_id for kf in keyframes]
    tid, kf, px = _window_observations(keyframes)
    cam_R = np.array([R[k] for k in kf_ids])
    cam_C = np.array([C[k] for k in kf_ids], dtype=float)
    ids, X, status = triangulate_observations(
        cam_R, cam_C, _camera_rows(kf_ids, kf), tid, intr.normalize(px), parallax_min
    )
    ok = status == TRI_OK
    if not ok.any():
        raise NoTriangulablePoints(f"window {window.window_id}: nothing to triangulate")
    return WindowEstimate(
        window_id=window.window_id,
        kf_ids=kf_ids,
        frame_indices={k.kf_id: k.frame_index for k in keyframes},
        timestamps={k.kf_id: k.timestamp for k in keyframes},
        rotations={k: np.asarray(R[k], dtype=float).copy() for k in kf_ids},
        positions={k: np.asarray(C[k], dtype=float).copy() for k in kf_ids},
        intrinsics=intr,
        points={int(t): x for t, x in zip(ids[ok], X[ok])},
        obs_tid=tid,
        obs_kf=kf,
        obs_px=px,
        deferred=set(ids[~ok].tolist()),
    )


def _point_rows(tids_sorted, obs_tid):
    """Index of each observation's track in ``tids_sorted`` (-1 if absent)."""
    pos = np.searchsorted(tids_sorted, obs_tid)
    pos = np.clip(pos, 0, max(len(tids_sorted) - 1, 0))
    hit = len(tids_sorted) > 0
    return np.where(hit & (tids_sorted[pos] == obs_tid) if hit else False, pos, -1)


def window_bundle_adjust(est, cfg=None):
    """Levenberg-Marquardt over poses, shared focal/distortion and points.

    Camera ``est.kf_ids[0]`` is frozen; the scale is fixed by keeping the
    distance from it to the farthest camera. Points with an observation
    whose final residual exceeds ``cfg.outlier_px``, or that end up behind
    a camera, are moved to ``deferred``.
    """
    cfg = cfg or BaConfig()
    if len(est.kf_ids) < 2 or len(est.points) < 3:
        raise SingularNormalEquations("need at least 2 cameras and 3 points")
    tids = np.array(sorted(est.points), dtype=np.int64)
    prow = _point_rows(tids, est.obs_tid)
    use = np.flatnonzero(prow >= 0)
    cam_idx = _camera_rows(est.kf_ids, est.obs_kf[use])
    intr = est.intrinsics
    state = BaState(
        np.array([est.rotations[k] for k in est.kf_ids]),
        np.array([est.positions[k] for k in est.kf_ids], dtype=float),
        np.array([est.points[t] for t in tids]),
        intr.focal,
        intr.r,
    )
    problem, result = _gated_solve(
        lambda refine, st: BundleProblem(
            st, intr.principal_point, cam_idx, prow[use], est.obs_px[use], fixed_cam=0,
            refine_intrinsics=refine, huber=cfg.huber,
        ),
        state,
        cfg,
    )
    s = result.state
    res = result.residuals
    bad = (np.linalg.norm(res, axis=1) > cfg.outlier_px) | (problem.depths(s) <= 0)
    bad_pt = np.zeros(len(tids), bool)
    bad_pt[prow[use][bad]] = True
    residuals = np.full((len(est.obs_tid), 2), np.nan)
    keep_obs = ~bad_pt[prow[use]]
    residuals[use[keep_obs]] = res[keep_obs]
    k0 = est.kf_ids[0]
    rotations = {k: s.R[i] for i, k in enumerate(est.kf_ids)}
    positions = {k: s.C[i] for i, k in enumerate(est.kf_ids)}
    # the frozen camera is returned bit-for-bit
    rotations[k0] = est.rotations[k0]
    positions[k0] = est.positions[k0]
    return replace(
        est,
        rotations=rotations,
        positions=positions,
        intrinsics=replace(intr, focal=float(s.f), r=float(s.r)),
        points={int(t): s.X[i] for i, t in enumerate(tids) if not bad_pt[i]},
        deferred=set(est.deferred) | set(tids[bad_pt].tolist()),
        residuals=residuals,
        cost_history=list(result.history),
        iterations=result.iterations,
        converged=result.converged,
    )


# ---------------------------------------------------------------------------
# Global map


@dataclass
class MapCamera:
    frame_index: int
    timestamp: float
    R: np.ndarray
    C: np.ndarray
    window: int
    segment: int


@dataclass
class GlobalMap:
    """Merged keyframes and points; one gauge per segment.

    Observations of all merged windows are kept as flat arrays, one row per
    (track id, keyframe id) pair.
    """

    cameras: dict = field(default_factory=dict)  # kf_id -> MapCamera
    points: dict = field(default_factory=dict)  # track id -> X
    point_home: dict = field(default_factory=dict)  # track id -> window id
    obs_tid: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    obs_kf: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    obs_px: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    deferred: set = field(default_factory=set)
    intrinsics: CameraIntrinsics = None
    intrinsics_weight: float = 0.0
    window_transforms: dict = field(default_factory=dict)  # window -> (s, R, t)
    window_segment: dict = field(default_factory=dict)
    segments: list = field(default_factory=list)  # lists of window ids
    breaks: list = field(default_factory=list)  # frame index where tracking was lost

    def trajectory(self):
        """Keyframes ordered by frame index: (frame_index, timestamp, R, C, segment)."""
        cams = sorted(self.cameras.values(), key=lambda c: c.frame_index)
        return [(c.frame_index, c.timestamp, c.R, c.C, c.segment) for c in cams]

    def views(self, tid):
        return _views_of(tid, self.obs_tid, self.obs_kf, self.obs_px)

    def point_segment(self, tid):
        return self.window_segment[self.point_home[tid]]

    def segment_cameras(self, segment):
        return {k: c for k, c in self.cameras.items() if c.segment == segment}

    def segment_points(self, segment):
        return {t: X for t, X in self.points.items() if self.window_segment[self.point_home[t]] == segment}


def _transform_estimate(est, sim):
    s, Rs, t = sim
    rot = {k: R @ Rs.T for k, R in est.rotations.items()}
    pos = {k: s * Rs @ C + t for k, C in est.positions.items()}
    pts = {k: s * Rs @ X + t for k, X in est.points.items()}
    return rot, pos, pts


def _robust_similarity(src, dst):
    sim = umeyama_similarity(src, dst)
    for _ in range(2):
        s, R, t = sim
        err = np.linalg.norm(s * src @ R.T + t - dst, axis=1)
        med = np.median(err)
        keep = err <= max(3.0 * med, 1e-12)
        if keep.sum() < 3 or keep.all():
            break
        sim = umeyama_similarity(src[keep], dst[keep])
    return sim


def _anchors(gmap, est, segment):
    src, dst = [], []
    for k in est.kf_ids:
        cam = gmap.cameras.get(k)
        if cam is not None and cam.segment == segment:
            src.append(est.positions[k])
            dst.append(cam.C)
    for tid, X in est.points.items():
        home = gmap.point_home.get(tid)
        if home is not None and tid in gmap.points and gmap.window_segment[home] == segment:
            src.append(X)
            dst.append(gmap.points[tid])
    return np.array(src).reshape(-1, 3), np.array(dst).reshape(-1, 3)


def _segment_observations(gmap, segment, tids):
    """Rows of map observations of ``tids`` made by cameras of ``segment``."""
    cams = gmap.segment_cameras(segment)
    if not cams or len(gmap.obs_tid) == 0:
        return np.zeros(0, np.int64), []
    kf_ids = sorted(cams)
    in_seg = np.zeros(max(max(kf_ids), int(gmap.obs_kf.max())) + 1, bool)
    in_seg[kf_ids] = True
    rows = np.flatnonzero(in_seg[gmap.obs_kf] & np.isin(gmap.obs_tid, np.asarray(list(tids), dtype=np.int64)))
    return rows, kf_ids


def _retriangulate(gmap, tids, segment, parallax_min):
    """Triangulate tracks from every map camera of ``segment`` that sees them.

    Returns dict track id -> (X, status).
    """
    if not tids:
        return {}
    rows, kf_ids = _segment_observations(gmap, segment, tids)
    if len(rows) == 0:
        return {}
    cam_R = np.array([gmap.cameras[k].R for k in kf_ids])
    cam_C = np.array([gmap.cameras[k].C for k in kf_ids])
    ids, X, status = triangulate_observations(
        cam_R, cam_C, _camera_rows(kf_ids, gmap.obs_kf[rows]), gmap.obs_tid[rows],
        gmap.intrinsics.normalize(gmap.obs_px[rows]), parallax_min,
    )
    return {int(t): (x, int(st)) for t, x, st in zip(ids, X, status)}


def merge_window(gmap, est, parallax_min=np.deg2rad(1.0)):
    """Bring a window estimate into the map's gauge and fuse it in.

    Anchors are shared keyframes and shared triangulated tracks of the
    current segment. With fewer than three usable anchors a new segment is
    started and a break is recorded. Tracks seen by both are re-triangulated
    from all map views; deferred tracks are retried with the enlarged set of
    views.
    """
    gmap = _copy_map(gmap)
    wid = est.window_id
    if not gmap.segments:
        segment = 0
        gmap.segments.append([])
        sim = (1.0, np.eye(3), np.zeros(3))
    else:
        segment = len(gmap.segments) - 1
        src, dst = _anchors(gmap, est, segment)
        try:
            if len(src) < 3:
                raise NoAnchors(f"window {wid}: {len(src)} anchors")
            sim = _robust_similarity(src, dst)
        except (NoAnchors, DegenerateSet) as err:
            log.warning("starting a new map segment: %s", err)
            segment += 1
            gmap.segments.append([])
            gmap.breaks.append(min(est.frame_indices.values()))
            sim = (1.0, np.eye(3), np.zeros(3))
    gmap.segments[segment].append(wid)
    gmap.window_segment[wid] = segment
    gmap.window_transforms[wid] = sim
    rot, pos, pts = _transform_estimate(est, sim)

    for k in est.kf_ids:
        if k not in gmap.cameras:
            gmap.cameras[k] = MapCamera(est.frame_indices[k], est.timestamps[k], rot[k], pos[k], wid, segment)

    n_obs = int(np.sum(np.isfinite(est.residuals[:, 0]))) if est.residuals is not None else len(est.obs_tid)
    if gmap.intrinsics is None:
        gmap.intrinsics = est.intrinsics
        gmap.intrinsics_weight = float(n_obs)
    else:
        w0, w1 = gmap.intrinsics_weight, float(n_obs)
        a = w1 / max(w0 + w1, 1e-300)
        gmap.intrinsics = replace(
            gmap.intrinsics,
            focal=(1 - a) * gmap.intrinsics.focal + a * est.intrinsics.focal,
            r=(1 - a) * gmap.intrinsics.r + a * est.intrinsics.r,
        )
        gmap.intrinsics_weight = w0 + w1

    fresh = ~np.isin(_pair_keys(est.obs_tid, est.obs_kf), _pair_keys(gmap.obs_tid, gmap.obs_kf))
    gmap.obs_tid = np.concatenate([gmap.obs_tid, est.obs_tid[fresh]])
    gmap.obs_kf = np.concatenate([gmap.obs_kf, est.obs_kf[fresh]])
    gmap.obs_px = np.concatenate([gmap.obs_px, est.obs_px[fresh]])

    shared = []
    for tid, X in pts.items():
        home = gmap.point_home.get(tid)
        if tid in gmap.points and gmap.window_segment[home] == segment:
            shared.append(tid)
        else:
            gmap.points[tid] = X
            gmap.point_home[tid] = wid
            gmap.deferred.discard(tid)
    # deferred tracks still seen by this window's cameras get another chance
    seen_now = set(np.unique(est.obs_tid).tolist())
    retry = [t for t in (set(est.deferred) | (gmap.deferred & seen_now)) if t not in gmap.points]
    tri = _retriangulate(gmap, shared + retry, segment, parallax_min)
    for tid in shared:
        X, status = tri.get(tid, (None, -1))
        if status == TRI_OK:
            gmap.points[tid] = X
    for tid in retry:
        X, status = tri.get(tid, (None, -1))
        if status == TRI_OK:
            gmap.points[tid] = X
            gmap.point_home[tid] = wid
            gmap.deferred.discard(tid)
        else:
            gmap.deferred.add(tid)
    return gmap


def _copy_map(g):
    return GlobalMap(
        cameras={k: replace(c) for k, c in g.cameras.items()},
        points=dict(g.points),
        point_home=dict(g.point_home),
        obs_tid=g.obs_tid,
        obs_kf=g.obs_kf,
        obs_px=g.obs_px,
        deferred=set(g.deferred),
        intrinsics=g.intrinsics,
        intrinsics_weight=g.intrinsics_weight,
        window_transforms=dict(g.window_transforms),
        window_segment=dict(g.window_segment),
        segments=[list(s) for s in g.segments],
        breaks=list(g.breaks),
    )


def _segment_problem(gmap, segment):
    """Flat observation rows, camera ids and point ids of one segment."""
    pts = gmap.segment_points(segment)
    tids = np.array(sorted(pts), dtype=np.int64)
    rows, kf_ids = _segment_observations(gmap, segment, tids)
    return rows, kf_ids, tids


def cross_window_rmse(gmap, segment=None):
    """RMSE (px) of observations made by cameras outside a point's home window."""
    if gmap.intrinsics is None or not gmap.segments:
        return 0.0
    segment = len(gmap.segments) - 1 if segment is None else segment
    rows, kf_ids, tids = _segment_problem(gmap, segment)
    if len(rows) == 0:
        return 0.0
    cams = gmap.cameras
    cam_win = np.array([cams[k].window for k in kf_ids])
    home = np.array([gmap.point_home[t] for t in tids])
    cr = _camera_rows(kf_ids, gmap.obs_kf[rows])
    pr = _point_rows(tids, gmap.obs_tid[rows])
    foreign = cam_win[cr] != home[pr]
    if not foreign.any():
        return 0.0
    cr, pr, px = cr[foreign], pr[foreign], gmap.obs_px[rows][foreign]
    R = np.array([cams[k].R for k in kf_ids])[cr]
    C = np.array([cams[k].C for k in kf_ids])[cr]
    X = np.array([gmap.points[t] for t in tids])[pr]
    q = np.einsum("oij,oj->oi", R, X - C)
    intr = gmap.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (intr.normalize(px) - q[:, :2] / q[:, 2:3]) * intr.focal
    sq = np.where(q[:, 2] > 0, np.sum(d * d, axis=1), np.inf)
    return float(np.sqrt(np.mean(sq)))


@dataclass
class RefineReport:
    triggered: bool
    rmse_before: float
    rmse_after: float
    scale_corrections: dict = field(default_factory=dict)
    result: BaResult = None


def global_refine(gmap, trigger=2.0, cfg=None):
    """Bundle-adjust the latest segment when its cross-window error is high.

    All cameras and points of the segment are free except the segment's
    first camera; the scale is held by the distance from it to the farthest
    camera of the first window. Per-window scale corrections are recovered
    afterwards as the similarity between each window's camera centres
    before and after refinement, and folded into ``window_transforms``.
    Returns ``(map, RefineReport)``.
    """
    cfg = cfg or BaConfig()
    if not gmap.segments or len(gmap.segments[-1]) < 2:
        return gmap, RefineReport(False, 0.0, 0.0)
    segment = len(gmap.segments) - 1
    before = cross_window_rmse(gmap, segment)
    if before <= trigger:
        return gmap, RefineReport(False, before, before)
    gmap = _copy_map(gmap)
    rows, kf_ids, tids = _segment_problem(gmap, segment)
    cams = gmap.cameras
    kf_ids = sorted(kf_ids, key=lambda k: cams[k].frame_index)
    first_window = gmap.segments[segment][0]
    C = np.array([cams[k].C for k in kf_ids])
    in_first = np.array([cams[k].window == first_window for k in kf_ids])
    scale_cam = int(np.argmax(np.linalg.norm(C - C[0], axis=1) * in_first))
    intr = gmap.intrinsics
    state = BaState(
        np.array([cams[k].R for k in kf_ids]), C.copy(), np.array([gmap.points[t] for t in tids]), intr.focal, intr.r
    )
    problem, result = _gated_solve(
        lambda refine, st: BundleProblem(
            st, intr.principal_point, _camera_rows(kf_ids, gmap.obs_kf[rows]),
            _point_rows(tids, gmap.obs_tid[rows]), gmap.obs_px[rows], fixed_cam=0, scale_cam=scale_cam,
            refine_intrinsics=refine, huber=cfg.huber,
        ),
        state,
        cfg,
    )
    s = result.state
    old_C = {k: cams[k].C for k in kf_ids}
    for i, k in enumerate(kf_ids[1:], start=1):
        cams[k].R = s.R[i]
        cams[k].C = s.C[i]
    # points that end up behind a camera or far off an observation are deferred
    bad = (np.linalg.norm(result.residuals, axis=1) > cfg.outlier_px) | (problem.depths(s) <= 0)
    bad_pt = np.zeros(len(tids), bool)
    bad_pt[problem.pt_idx[bad]] = True
    for i, t in enumerate(tids):
        if bad_pt[i]:
            del gmap.points[int(t)]
            gmap.deferred.add(int(t))
        else:
            gmap.points[int(t)] = s.X[i]
    gmap.intrinsics = replace(intr, focal=float(s.f), r=float(s.r))
    corrections = {}
    for wid in gmap.segments[segment]:
        ks = [k for k in kf_ids if cams[k].window == wid]
        if len(ks) < 3:
            continue
        try:
            sc, Rc, tc = umeyama_similarity(
                np.array([old_C[k] for k in ks]), np.array([cams[k].C for k in ks]), allow_collinear=True
            )
        except DegenerateSet:
            continue
        s0, R0, t0 = gmap.window_transforms[wid]
        gmap.window_transforms[wid] = (sc * s0, Rc @ R0, sc * Rc @ t0 + tc)
        corrections[wid] = sc
    after = cross_window_rmse(gmap, segment)
    return gmap, RefineReport(True, before, after, corrections, result)
