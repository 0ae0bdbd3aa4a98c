"""Front-end: corners, bidirectional LK tracking, the track table, keyframing."""
import enum
import logging
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DimensionMismatch, EmptyImage, NonContiguousFrame, TrackTableError

log = logging.getLogger(__name__)


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray = None


@dataclass
class TrackerConfig:
    max_corners: int = 800
    quality: float = 0.01
    min_distance: float = 10.0
    fb_max: float = 1.0
    levels: int = 3
    win_size: int = 21
    max_iters: int = 30
    eps: float = 0.01
    # reject LK when the minimum eigenvalue of the patch gradient matrix is below this
    min_eig: float = 1e-4

    def __post_init__(self):
        if self.max_corners < 1 or not 0 < self.quality <= 1 or self.min_distance < 0:
            raise ValueError("invalid corner detector settings")
        if self.fb_max <= 0 or self.levels < 0 or self.win_size < 3:
            raise ValueError("invalid LK settings")


class TrackTable:
    """Feature tracks stored per frame.

    ``frames[f]`` holds ``(track_ids, xy)`` arrays for frame ``f``. A track is
    a contiguous run of frames; once terminated its id is never reused.
    """

    def __init__(self, width=None, height=None):
        self.width = width
        self.height = height
        self.frames = {}
        self.alive = set()
        self.fb_errors = {}
        self.next_id = 0
        self.last_frame = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_arrays(cls, track_ids, frames, xy, width=None, height=None, validate=True):
        table = cls(width, height)
        track_ids = np.asarray(track_ids, dtype=np.int64)
        frames = np.asarray(frames, dtype=np.int64)
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if not (len(track_ids) == len(frames) == len(xy)):
            raise TrackTableError("track arrays differ in length")
        order = np.lexsort((track_ids, frames))
        track_ids, frames, xy = track_ids[order], frames[order], xy[order]
        bounds = np.flatnonzero(np.diff(frames)) + 1
        for tids, fr, pts in zip(np.split(track_ids, bounds), np.split(frames, bounds), np.split(xy, bounds)):
            if len(fr):
                table.frames[int(fr[0])] = (tids, pts)
        if len(frames):
            table.last_frame = int(frames.max())
            table.alive = set(table.frames[table.last_frame][0].tolist())
            table.next_id = int(track_ids.max()) + 1
        if validate:
            table.validate()
        return table

    def to_arrays(self):
        """Flattened ``(track_ids, frames, xy)`` sorted by track then frame."""
        if not self.frames:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
        tids = np.concatenate([self.frames[f][0] for f in sorted(self.frames)])
        fr = np.concatenate([np.full(len(self.frames[f][0]), f) for f in sorted(self.frames)])
        xy = np.concatenate([self.frames[f][1] for f in sorted(self.frames)])
        order = np.lexsort((fr, tids))
        return tids[order], fr[order], xy[order]

    def append_frame(self, frame_index, track_ids, xy):
        self.frames[int(frame_index)] = (np.asarray(track_ids, dtype=np.int64), np.asarray(xy, dtype=float).reshape(-1, 2))
        self.last_frame = int(frame_index)
        self.alive = set(int(t) for t in track_ids)
        if len(track_ids):
            self.next_id = max(self.next_id, int(np.max(track_ids)) + 1)

    # -- queries -----------------------------------------------------------

    def observations_at(self, frame_index):
        empty = (np.zeros(0, np.int64), np.zeros((0, 2)))
        return self.frames.get(int(frame_index), empty)

    def track(self, track_id):
        fr, pts = [], []
        for f in sorted(self.frames):
            tids, xy = self.frames[f]
            hit = np.flatnonzero(tids == track_id)
            if len(hit):
                fr.append(f)
                pts.append(xy[hit[0]])
        return np.array(fr, dtype=np.int64), np.array(pts).reshape(-1, 2)

    @property
    def frame_indices(self):
        return sorted(self.frames)

    @property
    def n_observations(self):
        return sum(len(t) for t, _ in self.frames.values())

    def track_lengths(self):
        tids, _, _ = self.to_arrays()
        ids, counts = np.unique(tids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    # -- invariants --------------------------------------------------------

    def validate(self):
        tids, fr, xy = self.to_arrays()
        if not np.all(np.isfinite(xy)):
            raise TrackTableError("non-finite coordinates")
        if self.width is not None and self.height is not None:
            bad = (xy[:, 0] < 0) | (xy[:, 1] < 0) | (xy[:, 0] > self.width - 1) | (xy[:, 1] > self.height - 1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise TrackTableError(f"track {tids[i]} frame {fr[i]}: ({xy[i, 0]}, {xy[i, 1]}) outside image")
        same = tids[1:] == tids[:-1]
        step = fr[1:] - fr[:-1]
        if np.any(same & (step != 1)):
            i = int(np.flatnonzero(same & (step != 1))[0])
            kind = "repeated" if step[i] == 0 else "non-contiguous"
            raise TrackTableError(f"track {tids[i]}: {kind} frame {fr[i + 1]}")
        for f, (t, p) in self.frames.items():
            if len(p) < 2:
                continue
            order = np.lexsort((p[:, 1], p[:, 0]))
            q = p[order]
            dup = np.all(np.abs(np.diff(q, axis=0)) <= 1e-9, axis=1)
            if dup.any():
                raise TrackTableError(f"frame {f}: two tracks share coordinates")
        return True


# ---------------------------------------------------------------------------
# Corners and optical flow


def _check_image(image):
    if image is None or image.size == 0:
        raise EmptyImage("empty image")
    return np.ascontiguousarray(image, dtype=np.uint8)


def detect_corners(image, max_corners=800, min_distance=10.0, quality=0.01, mask=None):
    """Shi-Tomasi corners, strongest first, as an (n, 2) float array."""
    image = _check_image(image)
    if not 0 < quality <= 1:
        raise ValueError("quality must lie in (0, 1]")
    if max_corners < 1:
        return np.zeros((0, 2))
    pts = cv2.goodFeaturesToTrack(
        image, maxCorners=int(max_corners), qualityLevel=float(quality), minDistance=float(min_distance), mask=mask
    )
    if pts is None:
        return np.zeros((0, 2))
    return pts.reshape(-1, 2).astype(float)


def _lk_params(cfg):
    return dict(
        winSize=(cfg.win_size, cfg.win_size),
        maxLevel=cfg.levels - 1 if cfg.levels > 0 else 0,
        criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, cfg.max_iters, cfg.eps),
        flags=cv2.OPTFLOW_LK_GET_MIN_EIGENVALS,
        minEigThreshold=cfg.min_eig,
    )


def track_bidirectional(prev, nxt, points, cfg=None):
    """Forward then backward pyramidal LK.

    Returns ``(points_next, fb_error, ok)``; ``ok`` is False for points whose
    forward-backward error exceeds ``cfg.fb_max``, whose flow failed, or that
    leave the image.
    """
    cfg = cfg or TrackerConfig()
    a = _check_image(prev.image if isinstance(prev, Frame) else prev)
    b = _check_image(nxt.image if isinstance(nxt, Frame) else nxt)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, bool)
    params = _lk_params(cfg)
    fwd, st1, _ = cv2.calcOpticalFlowPyrLK(a, b, pts, None, **params)
    bwd, st2, _ = cv2.calcOpticalFlowPyrLK(b, a, fwd, None, **params)
    fwd = fwd.reshape(-1, 2).astype(float)
    fb = np.linalg.norm(bwd.reshape(-1, 2) - pts.reshape(-1, 2), axis=1).astype(float)
    h, w = a.shape
    inside = (fwd[:, 0] >= 0) & (fwd[:, 1] >= 0) & (fwd[:, 0] <= w - 1) & (fwd[:, 1] <= h - 1)
    ok = (st1.ravel() == 1) & (st2.ravel() == 1) & (fb <= cfg.fb_max) & inside & np.isfinite(fb)
    return fwd, fb, ok


def advance(table, frame, cfg=None, prev_image=None):
    """Extend the table by one frame, then refill corners up to max_corners.

    ``prev_image`` must be the raster of the table's last frame (the table
    does not keep images).
    """
    cfg = cfg or TrackerConfig()
    image = _check_image(frame.image)
    h, w = image.shape
    if table.width is None:
        table.width, table.height = w, h
    elif (table.width, table.height) != (w, h):
        raise DimensionMismatch("frame size differs from table")
    if table.last_frame is not None and frame.index != table.last_frame + 1:
        raise NonContiguousFrame(f"expected frame {table.last_frame + 1}, got {frame.index}")
    tids = np.zeros(0, np.int64)
    xy = np.zeros((0, 2))
    if table.last_frame is not None and prev_image is not None:
        prev_ids, prev_xy = table.observations_at(table.last_frame)
        if len(prev_ids):
            nxt, fb, ok = track_bidirectional(prev_image, image, prev_xy, cfg)
            for t, e in zip(prev_ids[ok], fb[ok]):
                table.fb_errors.setdefault(int(t), []).append(float(e))
            tids, xy = prev_ids[ok], nxt[ok]
            # duplicate guard: keep the older track when two converge
            if len(xy) > 1:
                _, first = np.unique(np.round(xy, 6), axis=0, return_index=True)
                keep = np.sort(first)
                tids, xy = tids[keep], xy[keep]
    need = cfg.max_corners - len(tids)
    if need > 0:
        mask = np.full((h, w), 255, np.uint8)
        r = max(int(np.ceil(cfg.min_distance)), 1)
        for x, y in xy:
            cv2.circle(mask, (int(round(x)), int(round(y))), r, 0, -1)
        new = detect_corners(image, need, cfg.min_distance, cfg.quality, mask=mask)
        if len(new):
            ids = np.arange(table.next_id, table.next_id + len(new))
            table.next_id += len(new)
            tids = np.concatenate([tids, ids])
            xy = np.concatenate([xy, new])
    table.append_frame(frame.index, tids, xy)
    return table


def track_frames(frames, cfg=None):
    """Run ``advance`` over an iterable of frames and return the table."""
    table = TrackTable()
    prev = None
    for frame in frames:
        advance(table, frame, cfg, prev_image=prev)
        prev = frame.image
    return table


# ---------------------------------------------------------------------------
# Keyframes


class KeyframeReason(enum.Enum):
    FIRST = "first"
    PERIOD_ELAPSED = "period"
    FLOW_THRESHOLD = "flow"


@dataclass
class KeyframeDecision:
    frame_index: int
    reason: KeyframeReason
    mean_flow: float

    def __post_init__(self):
        if not self.mean_flow >= 0:
            raise ValueError("mean_flow must be non-negative")


def decide_keyframe(frame_index, mean_flow, frames_since_kf, P=30, m=20.0):
    """Keyframe when ``P`` frames have passed or the flow reached ``m`` px.

    ``mean_flow`` is the mean displacement of surviving tracks measured from
    the last keyframe, not a per-frame increment.
    """
    if P < 1 or m <= 0:
        raise ValueError("P must be >= 1 and m > 0")
    if frames_since_kf >= P:
        return KeyframeDecision(frame_index, KeyframeReason.PERIOD_ELAPSED, float(mean_flow))
    if mean_flow >= m:
        return KeyframeDecision(frame_index, KeyframeReason.FLOW_THRESHOLD, float(mean_flow))
    return None


def mean_flow_between(table, kf_frame, frame):
    """Mean displacement of tracks present in both frames, or None if none are."""
    a_ids, a_xy = table.observations_at(kf_frame)
    b_ids, b_xy = table.observations_at(frame)
    common, ia, ib = np.intersect1d(a_ids, b_ids, assume_unique=True, return_indices=True)
    if len(common) == 0:
        return None
    return float(np.mean(np.linalg.norm(b_xy[ib] - a_xy[ia], axis=1)))


def select_keyframes(table, P=30, m=20.0):
    """Walk the table and return the keyframe decisions, first frame included.

    Frames without observations are never keyframes. When a frame shares no
    track with the last keyframe it is designated immediately (the flow to
    it is unmeasurable); its ``mean_flow`` is reported as ``m``.
    """
    decisions = []
    last = None
    for f in table.frame_indices:
        if len(table.observations_at(f)[0]) == 0:
            continue
        if last is None:
            decisions.append(KeyframeDecision(f, KeyframeReason.FIRST, 0.0))
            last = f
            continue
        flow = mean_flow_between(table, last, f)
        if flow is None:
            d = KeyframeDecision(f, KeyframeReason.FLOW_THRESHOLD, float(m))
        else:
            d = decide_keyframe(f, flow, f - last, P, m)
        if d is not None:
            decisions.append(d)
            last = f
    return decisions


# ---------------------------------------------------------------------------
# File input/output


def read_tracks(path, width=None, height=None):
    """Read ``track_id frame x y`` lines; ``#`` starts a comment.

    A ``# image W H`` header line supplies the raster size for bounds checks.
    """
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                parts = s[1:].split()
                if len(parts) == 3 and parts[0] == "image" and width is None:
                    width, height = int(parts[1]), int(parts[2])
                continue
            parts = s.split()
            if len(parts) != 4:
                raise TrackTableError(f"{path}:{n}: expected 4 fields, got {len(parts)}")
            try:
                rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as err:
                raise TrackTableError(f"{path}:{n}: {err}") from err
    a = np.array(rows, dtype=float).reshape(-1, 4)
    return TrackTable.from_arrays(a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2:], width, height)


def write_tracks(path, table):
    tids, fr, xy = table.to_arrays()
    with open(path, "w") as fh:
        if table.width is not None:
            fh.write(f"# image {table.width} {table.height}\n")
        for t, f, (x, y) in zip(tids, fr, xy):
            fh.write(f"{t} {f} {x:.17g} {y:.17g}\n")


def load_image_dir(path, fps=30.0):
    """Grayscale frames from a PGM/PNG directory, in lexicographic order.

    Timestamps come from ``times.txt`` when present, else index / fps.
    """
    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".pgm", ".png")))
    if not names:
        raise FileNotFoundError(f"no PGM/PNG images in {path}")
    times_path = os.path.join(path, "times.txt")
    if os.path.exists(times_path):
        times = np.loadtxt(times_path, ndmin=1)
        if len(times) < len(names):
            raise ValueError("times.txt has fewer lines than images")
        if np.any(np.diff(times[: len(names)]) < 0):
            raise ValueError("timestamps must be non-decreasing")
    else:
        times = np.arange(len(names)) / fps
    for i, name in enumerate(names):
        image = cv2.imread(os.path.join(path, name), cv2.IMREAD_GRAYSCALE)
        if image is None:
            raise OSError(f"cannot read {name}")
        yield Frame(i, float(times[i]), image)
