"""Keyframes, temporal windows and their view graphs."""
import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DisconnectedGraph,
    InsufficientInliers,
    InsufficientKeyframes,
    NoSharedTracks,
)
from .geometry import RansacConfig, RelativePose, estimate_relative_pose, matrix_to_quat
from .averaging import _components

log = logging.getLogger(__name__)


@dataclass
class Keyframe:
    kf_id: int
    frame_index: int
    timestamp: float
    track_ids: np.ndarray
    pixels: np.ndarray

    @property
    def observations(self):
        return [(int(t), float(x), float(y)) for t, (x, y) in zip(self.track_ids, self.pixels)]


class EdgeKind(enum.Enum):
    SEQUENTIAL = "sequential"
    LOOP_CLOSURE = "loop"


@dataclass
class ViewGraphEdge:
    i: int  # kf_id, i < j
    j: int
    rel: RelativePose
    kind: EdgeKind
    shared: int = 0

    @property
    def translation_reliable(self):
        return self.rel.translation_reliable


@dataclass
class Window:
    window_id: int
    keyframes: list
    edges: list
    overlap_with_prev: int = 0

    @property
    def kf_ids(self):
        return [kf.kf_id for kf in self.keyframes]


@dataclass
class GraphConfig:
    w_min: int = 10
    w_max: int = 30
    overlap: int = 0
    loop_recent: int = 5
    min_shared: int = 20
    loop_min_ratio: float = 0.5
    loop_closures: bool = True
    seed: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.loop_recent < 1 or self.min_shared < 8 or not 0 < self.loop_min_ratio <= 1:
            raise ValueError("invalid view-graph settings")
        if self.overlap < 0 or self.w_min > self.w_max:
            raise ValueError("invalid window settings")


def keyframes_from_table(table, frame_indices, timestamps=None):
    """Keyframe objects for the given frames, numbered from zero."""
    out = []
    for k, f in enumerate(frame_indices):
        tids, xy = table.observations_at(f)
        t = float(timestamps[f]) if timestamps is not None else float(f)
        out.append(Keyframe(k, int(f), t, tids.copy(), xy.copy()))
    return out


def make_correspondences(kf_i, kf_j, intr):
    """Normalized, distortion-corrected matches on shared track ids.

    Returns ``(track_ids, x_i, x_j)``.
    """
    common, ia, ib = np.intersect1d(kf_i.track_ids, kf_j.track_ids, assume_unique=True, return_indices=True)
    if len(common) == 0:
        raise NoSharedTracks(f"keyframes {kf_i.kf_id} and {kf_j.kf_id} share no tracks")
    return common, intr.normalize(kf_i.pixels[ia]), intr.normalize(kf_j.pixels[ib])


def edge_seed(seed, i, j):
    """Per-edge RANSAC seed, independent of evaluation order."""
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])


def estimate_edge(kf_i, kf_j, intr, cfg, kind=EdgeKind.SEQUENTIAL):
    """Relative-pose edge between two keyframes, or None when unsupported."""
    try:
        tids, x1, x2 = make_correspondences(kf_i, kf_j, intr)
    except NoSharedTracks:
        return None
    if len(tids) < cfg.min_shared:
        return None
    rcfg = replace(cfg.ransac, seed=edge_seed(cfg.seed, kf_i.kf_id, kf_j.kf_id))
    try:
        rel = estimate_relative_pose(x1, x2, rcfg)
    except (DegenerateConfiguration, InsufficientInliers) as err:
        log.debug("edge %d-%d rejected: %s", kf_i.kf_id, kf_j.kf_id, err)
        return None
    if kind is EdgeKind.LOOP_CLOSURE and rel.inlier_count < cfg.loop_min_ratio * len(tids):
        return None
    return ViewGraphEdge(kf_i.kf_id, kf_j.kf_id, rel, kind, len(tids))


def propose_loop_edges(new_kf, recent, intr, cfg=None):
    """Loop-closure edges from ``new_kf`` to recent non-adjacent keyframes.

    ``recent`` lists earlier keyframes; only the last ``cfg.loop_recent`` of
    them that are not the immediate predecessor are tried.
    """
    cfg = cfg or GraphConfig()
    cands = [kf for kf in recent if kf.kf_id < new_kf.kf_id - 1][-cfg.loop_recent :]
    edges = []
    for kf in cands:
        e = estimate_edge(kf, new_kf, intr, cfg, EdgeKind.LOOP_CLOSURE)
        if e is not None:
            edges.append(e)
    return edges


def partition_windows(n, w_min=10, w_max=30, overlap=0):
    """Split ``n`` keyframes into consecutive windows of near-equal size.

    Returns a list of ``(start, stop)`` index ranges; consecutive windows
    share ``overlap`` keyframes. A sequence shorter than ``w_min`` becomes a
    single window.
    """
    if w_max < 2:
        raise InsufficientKeyframes(f"window size {w_max} cannot hold a relative pose")
    if n < 2:
        raise InsufficientKeyframes(f"{n} keyframes")
    if overlap >= w_min:
        raise ValueError("overlap must be smaller than w_min")
    if n <= w_max:
        return [(0, n)]
    stride = w_max - overlap
    count = int(np.ceil((n - overlap) / stride))
    steps = np.full(count, (n - overlap) // count)
    steps[: (n - overlap) % count] += 1
    out, start = [], 0
    for d in steps:
        out.append((start, start + d + overlap))
        start += d
    return out


def build_window(window_id, keyframes, intr, cfg=None, overlap_with_prev=0):
    """Sequential and loop-closure edges over the keyframes of one window.

    Raises DisconnectedGraph (with the connected components) when the edges
    do not connect every keyframe.
    """
    cfg = cfg or GraphConfig()
    if len(keyframes) < 2:
        raise InsufficientKeyframes(f"window {window_id} has {len(keyframes)} keyframe(s)")
    if len(keyframes) > max(cfg.w_max, 2):
        raise InsufficientKeyframes(f"window {window_id} exceeds {cfg.w_max} keyframes")
    edges = []
    for a, b in zip(keyframes[:-1], keyframes[1:]):
        e = estimate_edge(a, b, intr, cfg)
        if e is not None:
            edges.append(e)
    if cfg.loop_closures:
        for k in range(2, len(keyframes)):
            edges.extend(propose_loop_edges(keyframes[k], keyframes[:k], intr, cfg))
    ids = [kf.kf_id for kf in keyframes]
    comps = _components(ids, [(e.i, e.j) for e in edges])
    if len(comps) > 1:
        pos = {k: p for p, k in enumerate(ids)}
        comps = sorted((sorted(pos[k] for k in c) for c in comps), key=lambda c: c[0])
        raise DisconnectedGraph(f"window {window_id} splits into {len(comps)} parts", comps, edges)
    return Window(window_id, list(keyframes), edges, overlap_with_prev)


def dump_graph(path, windows):
    """Write ``edge kf_i kf_j kind inliers qw qx qy qz tx ty tz`` lines."""
    with open(path, "w") as fh:
        for w in windows:
            for e in w.edges:
                q = matrix_to_quat(e.rel.rotation)
                t = e.rel.direction
                fh.write(
                    f"edge {e.i} {e.j} {e.kind.value} {e.rel.inlier_count} "
                    + " ".join(f"{v:.9g}" for v in (*q, *t))
                    + "\n"
                )
