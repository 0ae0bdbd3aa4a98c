"""End-to-end windowed pipeline: keyframes, view graphs, averaging, WBA, merging."""
import dataclasses
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .averaging import (
    AveragingConfig,
    AveragingEdge,
    AveragingProblem,
    average_rotations,
    average_translations,
    build_camera_point_constraints,
)
from .bundle import BaConfig, GlobalMap, global_refine, initialize_structure, merge_window, window_bundle_adjust
from .errors import (
    ConfigError,
    Disconnected,
    DisconnectedGraph,
    InsufficientKeyframes,
    NoTriangulablePoints,
    SingularNormalEquations,
    Underconstrained,
)
from .geometry import RansacConfig
from .tracking import TrackerConfig, select_keyframes
from .viewgraph import EdgeKind, GraphConfig, Window, build_window, keyframes_from_table, partition_windows

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline; angles are given in degrees."""

    seed: int = 0
    # keyframing
    period: int = 30
    min_flow: float = 20.0
    # windows and view graphs
    w_min: int = 10
    w_max: int = 30
    overlap: int = 0
    loop_recent: int = 5
    loop_closures: bool = True
    loop_min_ratio: float = 0.5
    min_shared: int = 20
    # relative pose
    solver: str = "eight_point"
    ransac_threshold: float = 3e-3
    ransac_iters: int = 1000
    min_inlier_ratio: float = 0.33
    reliable_parallax_deg: float = 0.5
    # averaging
    rot_huber: float = 0.1
    trans_huber: float = 0.01
    point_weight: float = 0.5
    k_tracks: int = 50
    # structure and bundle adjustment
    parallax_min_deg: float = 1.0
    ba_max_iters: int = 100
    ba_ftol: float = 1e-10
    ba_xtol: float = 1e-12
    ba_huber: float = 2.0
    ba_damping: float = 1e-4
    refine_intrinsics: bool = True
    focal_max_std: float = 0.005
    distortion_max_std: float = 0.01
    intrinsics_sigma_px: float = 1.0
    refine_trigger: float = 2.0
    # global refinement stops once an iteration gains less than this fraction of the cost
    refine_ftol: float = 1e-6
    # front end (image input only)
    max_corners: int = 800
    corner_quality: float = 0.01
    corner_distance: float = 10.0
    fb_max: float = 1.0
    fps: float = 30.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "period", "min_flow", "w_max", "loop_recent", "min_shared", "ransac_threshold", "ransac_iters",
            "rot_huber", "trans_huber", "point_weight", "ba_max_iters", "ba_ftol", "ba_xtol", "ba_huber",
            "ba_damping", "focal_max_std", "distortion_max_std", "intrinsics_sigma_px", "refine_trigger", "refine_ftol",
            "max_corners", "corner_quality", "fb_max", "fps", "loop_min_ratio",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.w_min < 2 or self.w_min > self.w_max:
            raise ConfigError(f"need 2 <= w_min <= w_max, got {self.w_min}, {self.w_max}")
        if not 0 <= self.overlap < self.w_min:
            raise ConfigError("overlap must lie in [0, w_min)")
        if self.min_shared < 8:
            raise ConfigError("min_shared must be at least 8")
        if not 0 < self.min_inlier_ratio <= 1 or not 0 < self.loop_min_ratio <= 1 or self.corner_quality > 1:
            raise ConfigError("ratios must lie in (0, 1]")
        if self.solver not in ("eight_point", "five_point"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.k_tracks < 0 or self.reliable_parallax_deg < 0 or self.parallax_min_deg < 0:
            raise ConfigError("k_tracks and parallax thresholds must be non-negative")

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values, base=None):
        """Build from string values; unknown keys raise ConfigError."""
        base = base or cls()
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(base, key)
            try:
                if isinstance(default, bool):
                    s = str(raw).strip().lower()
                    if s not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                        raise ValueError(raw)
                    out[key] = s in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    out[key] = int(raw)
                elif isinstance(default, float):
                    out[key] = float(raw)
                else:
                    out[key] = str(raw).strip()
            except ValueError as err:
                raise ConfigError(f"bad value for {key}: {raw!r}") from err
        return dataclasses.replace(base, **out)

    def lines(self):
        return [f"{k} = {getattr(self, k)}" for k in self.keys()]

    # -- per-module configs ----------------------------------------------

    def ransac(self):
        return RansacConfig(
            seed=self.seed,
            max_iters=self.ransac_iters,
            threshold=self.ransac_threshold,
            min_inlier_ratio=self.min_inlier_ratio,
            solver=self.solver,
            parallax_reliable=np.deg2rad(self.reliable_parallax_deg),
        )

    def graph(self):
        return GraphConfig(
            w_min=self.w_min,
            w_max=self.w_max,
            overlap=self.overlap,
            loop_recent=self.loop_recent,
            min_shared=self.min_shared,
            loop_min_ratio=self.loop_min_ratio,
            loop_closures=self.loop_closures,
            seed=self.seed,
            ransac=self.ransac(),
        )

    def averaging(self):
        return AveragingConfig(
            rot_huber=self.rot_huber,
            trans_huber=self.trans_huber,
            point_weight=self.point_weight,
            k_tracks=self.k_tracks,
            seed=self.seed,
        )

    def tracker(self):
        return TrackerConfig(
            max_corners=self.max_corners,
            quality=self.corner_quality,
            min_distance=self.corner_distance,
            fb_max=self.fb_max,
        )

    def bundle(self):
        return BaConfig(
            max_iters=self.ba_max_iters,
            ftol=self.ba_ftol,
            xtol=self.ba_xtol,
            huber=self.ba_huber,
            damping_init=self.ba_damping,
            refine_intrinsics=self.refine_intrinsics,
            focal_max_std=self.focal_max_std,
            distortion_max_std=self.distortion_max_std,
            intrinsics_sigma_px=self.intrinsics_sigma_px,
        )

    def refine(self):
        return replace(self.bundle(), ftol=self.refine_ftol)


@dataclass
class WindowLog:
    window_id: int
    kf_ids: list
    edges: int = 0
    loop_edges: int = 0
    unreliable_edges: int = 0
    rmse: float = float("nan")
    ba_iterations: int = 0
    ba_history: list = field(default_factory=list)
    ba_converged: bool = True
    failure: str = ""


@dataclass
class PipelineResult:
    gmap: GlobalMap
    keyframes: list
    windows: list  # WindowLog
    timings: dict
    refinements: list = field(default_factory=list)
    config: PipelineConfig = None

    @property
    def breaks(self):
        return len(self.gmap.breaks)

    def monotonic_violations(self):
        """Accepted BA steps that raised the cost (always expected to be 0)."""
        bad = 0
        hists = [w.ba_history for w in self.windows] + [r.result.history for r in self.refinements if r.result]
        for h in hists:
            bad += int(np.sum(np.diff(h) > 0))
        return bad


class _Timer:
    def __init__(self):
        self.totals = {}

    def add(self, key, start):
        self.totals[key] = self.totals.get(key, 0.0) + time.perf_counter() - start


def _split_window(window_id, keyframes, err):
    """Sub-windows for the connected components of a disconnected graph."""
    parts = []
    for comp in err.components:
        if len(comp) < 2:
            log.warning("window %d: dropping isolated keyframe(s) %s", window_id, comp)
            continue
        kfs = [keyframes[p] for p in comp]
        ids = {kf.kf_id for kf in kfs}
        edges = [e for e in err.edges if e.i in ids and e.j in ids]
        parts.append(Window(window_id, kfs, edges))
    return parts


def solve_window(window, intr, cfg, timer=None):
    """Averaging, triangulation and WBA for one connected window."""
    timer = timer or _Timer()
    acfg = cfg.averaging()
    t0 = time.perf_counter()
    edges = [
        AveragingEdge(e.i, e.j, e.rel.rotation, e.rel.direction, e.translation_reliable, float(e.rel.inlier_count))
        for e in window.edges
    ]
    problem = AveragingProblem(window.kf_ids, edges)
    rot = average_rotations(problem, acfg)
    problem.point_constraints = build_camera_point_constraints(window.keyframes, rot.rotations, intr, acfg)
    try:
        pos = average_translations(problem, rot, acfg)
    except (Underconstrained, Disconnected):
        # more camera-point constraints usually pin down the remaining freedom
        acfg = dataclasses.replace(acfg, k_tracks=max(4 * acfg.k_tracks, 200))
        problem.point_constraints = build_camera_point_constraints(window.keyframes, rot.rotations, intr, acfg)
        pos = average_translations(problem, rot, acfg)
    timer.add("motion_averaging", t0)
    t0 = time.perf_counter()
    est = initialize_structure(window, rot.rotations, pos.positions, intr, np.deg2rad(cfg.parallax_min_deg))
    timer.add("triangulation", t0)
    t0 = time.perf_counter()
    est = window_bundle_adjust(est, cfg.bundle())
    timer.add("bundle_adjustment", t0)
    return est


def run_pipeline(table, intr, timestamps=None, cfg=None):
    """Run the full back-end on a track table.

    Returns a PipelineResult. Windows that cannot be solved are logged and
    skipped; each contiguous run of such windows loses track of the camera
    and is recorded as one break, whether or not the next solved window can
    be anchored to the map.
    """
    cfg = cfg or PipelineConfig()
    timer = _Timer()
    t0 = time.perf_counter()
    decisions = select_keyframes(table, cfg.period, cfg.min_flow)
    frames = [d.frame_index for d in decisions]
    if timestamps is None:
        timestamps = {f: f / cfg.fps for f in table.frame_indices}
    keyframes = keyframes_from_table(table, frames, timestamps)
    timer.add("keyframing", t0)
    ranges = partition_windows(len(keyframes), cfg.w_min, cfg.w_max, cfg.overlap)
    gcfg = cfg.graph()
    gmap = GlobalMap()
    logs, refinements = [], []
    current = intr
    lost_from = None  # first frame of an unsolved stretch
    for wid, (a, b) in enumerate(ranges):
        kfs = keyframes[a:b]
        t0 = time.perf_counter()
        try:
            windows = [build_window(wid, kfs, current, gcfg, overlap_with_prev=cfg.overlap if wid else 0)]
        except DisconnectedGraph as err:
            log.warning("%s", err)
            windows = _split_window(wid, kfs, err)
        except InsufficientKeyframes as err:
            log.warning("%s", err)
            windows = []
        timer.add("relative_pose", t0)
        for window in windows:
            wl = WindowLog(
                wid,
                window.kf_ids,
                len(window.edges),
                sum(e.kind is EdgeKind.LOOP_CLOSURE for e in window.edges),
                sum(not e.translation_reliable for e in window.edges),
            )
            logs.append(wl)
            try:
                est = solve_window(window, current, cfg, timer)
            except (Underconstrained, Disconnected, NoTriangulablePoints, SingularNormalEquations) as err:
                log.warning("window %d failed: %s", wid, err)
                wl.failure = type(err).__name__
                if lost_from is None:
                    lost_from = window.keyframes[0].frame_index
                continue
            wl.rmse = est.rmse
            wl.ba_iterations = est.iterations
            wl.ba_history = est.cost_history
            wl.ba_converged = est.converged
            t0 = time.perf_counter()
            n_breaks = len(gmap.breaks)
            gmap = merge_window(gmap, est, np.deg2rad(cfg.parallax_min_deg))
            if lost_from is not None:
                if len(gmap.breaks) == n_breaks:
                    gmap.breaks = sorted(gmap.breaks + [lost_from])
                lost_from = None
            timer.add("merging", t0)
            t0 = time.perf_counter()
            try:
                gmap, rep = global_refine(gmap, cfg.refine_trigger, cfg.refine())
                if rep.triggered:
                    refinements.append(rep)
            except SingularNormalEquations as err:
                log.warning("global refinement skipped: %s", err)
            timer.add("global_refinement", t0)
            current = gmap.intrinsics
    if lost_from is not None:
        gmap.breaks = sorted(gmap.breaks + [lost_from])
    return PipelineResult(gmap, keyframes, logs, timer.totals, refinements, cfg)
