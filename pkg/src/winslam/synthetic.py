"""Synthetic planar scenes, motion profiles and generated track sequences."""
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import EmptyVisibility
from .geometry import CameraIntrinsics, rot_x, rot_y, rot_z
from .tracking import TrackTable

MAX_PLANE_EXTENT = 5.12


class ProfileKind(enum.Enum):
    FRONTAL = "frontal"
    LEFT_RIGHT = "left-right"
    EGOMOTION = "egomotion"


@dataclass
class MotionProfile:
    """Camera path of a synthetic sequence.

    Frontal moves forward (+z) without rotation, LeftRight moves sideways
    (+x) looking forward, Egomotion moves forward while the view scans in
    yaw with small roll/pitch jitter.
    """

    kind: ProfileKind
    length: float
    speed: float = 1.0
    fps: float = 30.0
    yaw_amplitude: float = np.deg2rad(20.0)
    yaw_frequency: float = 0.5
    jitter: float = np.deg2rad(2.0)
    jitter_period: int = 10  # frames between jitter knots
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = ProfileKind(self.kind)
        if self.length <= 0 or self.speed <= 0 or self.fps <= 0:
            raise ValueError("length, speed and fps must be positive")

    @property
    def default_frames(self):
        return int(round(self.length / self.speed * self.fps)) + 1

    def poses(self, n_frames=None):
        """Rotations (n, 3, 3) and centres (n, 3) spread evenly over the path."""
        n = n_frames or self.default_frames
        if n < 2:
            raise ValueError("need at least two frames")
        s = np.linspace(0.0, self.length, n)
        t = np.arange(n) / self.fps
        C = np.zeros((n, 3))
        R = np.tile(np.eye(3), (n, 1, 1))
        if self.kind is ProfileKind.LEFT_RIGHT:
            C[:, 0] = s - self.length / 2
        else:
            C[:, 2] = s
        if self.kind is ProfileKind.EGOMOTION:
            # elapsed time follows the path so the scan rate is tied to speed
            t = s / self.speed
            yaw = self.yaw_amplitude * np.sin(2 * np.pi * self.yaw_frequency * t)
            rng = np.random.default_rng(self.seed)
            knots = np.arange(0, n + self.jitter_period, self.jitter_period)
            roll = CubicSpline(knots, rng.normal(0, self.jitter, len(knots)))(np.arange(n))
            pitch = CubicSpline(knots, rng.normal(0, self.jitter, len(knots)))(np.arange(n))
            for k in range(n):
                # world-to-camera rotation of a camera turned by yaw/pitch/roll
                R[k] = (rot_y(yaw[k]) @ rot_x(pitch[k]) @ rot_z(roll[k])).T
        return R, C


@dataclass
class Plane:
    center: np.ndarray
    normal: np.ndarray
    axes: np.ndarray  # (3, 2) orthonormal in-plane directions
    extent: tuple


@dataclass
class SyntheticScene:
    planes: list
    points: np.ndarray  # (N, 3)
    plane_of: np.ndarray  # (N,) plane index
    intrinsics: CameraIntrinsics
    width: int = 640
    height: int = 480
    seed: int = 0


def make_scene(profile_or_centres, n_planes=5, points_per_plane=400, depth_range=(2.0, 10.0),
               intrinsics=None, width=640, height=480, seed=0, block_length=8.0):
    """Planes at staggered depths in front of a camera path.

    The path is cut into blocks of ``block_length`` metres of forward
    travel; each block gets ``n_planes`` planes whose depths, measured
    beyond the block's far end, span ``depth_range``. Lateral centres cover
    the sideways extent of the path. Planes face the path with up to 30
    degrees of tilt and have sides of at most 5.12 m.
    """
    if isinstance(profile_or_centres, MotionProfile):
        _, C = profile_or_centres.poses()
    else:
        C = np.asarray(profile_or_centres, dtype=float)
    intr = intrinsics or CameraIntrinsics(500.0, width / 2.0, height / 2.0)
    rng = np.random.default_rng(seed)
    z0, z1 = C[:, 2].min(), C[:, 2].max()
    x0, x1 = C[:, 0].min(), C[:, 0].max()
    n_blocks = max(1, int(np.ceil((z1 - z0) / block_length - 1e-9)))
    planes, pts, owner = [], [], []
    for b in range(n_blocks):
        z_ref = min(z1, z0 + block_length * (b + 1))
        depths = np.linspace(depth_range[0], depth_range[1], n_planes)
        lateral = np.linspace(x0 - 1.0, x1 + 1.0, n_planes)
        rng.shuffle(lateral)
        for k in range(n_planes):
            center = np.array([lateral[k], rng.uniform(-0.5, 0.5), z_ref + depths[k]])
            tilt = rng.uniform(-np.deg2rad(30), np.deg2rad(30))
            Rp = rot_y(tilt) @ rot_x(rng.uniform(-np.deg2rad(10), np.deg2rad(10)))
            normal = Rp @ np.array([0.0, 0.0, -1.0])
            axes = Rp[:, :2]
            extent = (rng.uniform(3.0, MAX_PLANE_EXTENT), rng.uniform(3.0, MAX_PLANE_EXTENT))
            uv = (rng.random((points_per_plane, 2)) - 0.5) * np.array(extent)
            planes.append(Plane(center, normal, axes, extent))
            pts.append(center + uv @ axes.T)
            owner.append(np.full(points_per_plane, len(planes) - 1))
    return SyntheticScene(planes, np.concatenate(pts), np.concatenate(owner), intr, width, height, seed)


@dataclass
class SyntheticSequence:
    table: TrackTable
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    rotations: np.ndarray  # (F, 3, 3) world-to-camera
    centers: np.ndarray  # (F, 3)
    points: dict  # track id -> ground-truth 3D point
    scene: SyntheticScene
    point_index: dict = field(default_factory=dict)  # track id -> scene point index


def _project_all(intr, R, C, X):
    q = (X - C) @ R.T
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.to_pixels(q[:, :2] / z[:, None])
    return px, z


def generate_sequence(scene, profile, n_frames=None, noise_px=0.5, seed=0, gap=None, min_depth=0.5):
    """Project the scene through the profile's poses into a track table.

    Observations outside the raster or closer than ``min_depth`` are
    dropped; a point that leaves and re-enters the view starts a new track.
    ``gap = (start, length)`` blanks all observations of those frames.
    """
    if noise_px < 0:
        raise ValueError("noise_px must be non-negative")
    R, C = profile.poses(n_frames)
    n = len(C)
    rng = np.random.default_rng(seed)
    intr = scene.intrinsics
    W, H = scene.width, scene.height
    N = len(scene.points)
    current = np.full(N, -1, dtype=np.int64)
    next_id = 0
    table = TrackTable(W, H)
    gt, index = {}, {}
    for f in range(n):
        px, z = _project_all(intr, R[f], C[f], scene.points)
        if noise_px > 0:
            px = px + rng.normal(0.0, noise_px, px.shape)
        vis = (z > min_depth) & np.all(np.isfinite(px), axis=1)
        vis &= (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)
        if gap is not None and gap[0] <= f < gap[0] + gap[1]:
            vis[:] = False
        current[~vis] = -1
        fresh = vis & (current < 0)
        k = int(fresh.sum())
        current[fresh] = np.arange(next_id, next_id + k)
        for p, t in zip(np.flatnonzero(fresh), current[fresh]):
            gt[int(t)] = scene.points[p]
            index[int(t)] = int(p)
        next_id += k
        ids = current[vis]
        table.append_frame(f, ids, px[vis])
    table.next_id = next_id
    lengths = table.track_lengths()
    if not any(v >= 2 for v in lengths.values()):
        raise EmptyVisibility("no point is visible in two frames")
    times = np.arange(n) / profile.fps
    return SyntheticSequence(table, intr, times, R, C, gt, scene, index)


def render_frame(scene, R, C, cell=0.05, seed=None):
    """Grayscale raster of the textured planes seen from ``(R, C)``.

    Each plane carries a bilinearly interpolated random-value texture with
    ``cell``-metre cells; the nearest plane along each pixel ray wins.
    """
    intr = scene.intrinsics
    W, H = scene.width, scene.height
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    x = intr.normalize(np.stack([u.ravel(), v.ravel()], axis=1))
    rays = np.column_stack([x, np.ones(len(x))]) @ R  # world-frame directions
    best = np.full(len(rays), np.inf)
    value = np.zeros(len(rays))
    for k, plane in enumerate(scene.planes):
        tex_rng = np.random.default_rng((scene.seed if seed is None else seed) * 1000 + k)
        nu = int(np.ceil(plane.extent[0] / cell)) + 2
        nv = int(np.ceil(plane.extent[1] / cell)) + 2
        tex = tex_rng.uniform(30, 225, (nu, nv))
        denom = rays @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((plane.center - C) @ plane.normal) / denom
        hit = np.isfinite(lam) & (lam > 0) & (lam < best)
        P = C + lam[hit, None] * rays[hit]
        uv = (P - plane.center) @ plane.axes
        inside = (np.abs(uv[:, 0]) <= plane.extent[0] / 2) & (np.abs(uv[:, 1]) <= plane.extent[1] / 2)
        idx = np.flatnonzero(hit)[inside]
        uv = uv[inside] / cell + np.array([nu, nv]) / 2 - 0.5
        i0 = np.clip(np.floor(uv).astype(int), 0, [nu - 2, nv - 2])
        a = np.clip(uv - i0, 0, 1)
        val = (
            tex[i0[:, 0], i0[:, 1]] * (1 - a[:, 0]) * (1 - a[:, 1])
            + tex[i0[:, 0] + 1, i0[:, 1]] * a[:, 0] * (1 - a[:, 1])
            + tex[i0[:, 0], i0[:, 1] + 1] * (1 - a[:, 0]) * a[:, 1]
            + tex[i0[:, 0] + 1, i0[:, 1] + 1] * a[:, 0] * a[:, 1]
        )
        best[idx] = lam[idx]
        value[idx] = val
    return np.clip(value, 0, 255).astype(np.uint8).reshape(H, W)


def mean_pair_parallax(seq, stride=5):
    """Mean rotation-compensated ray angle between frames ``stride`` apart."""
    angles = []
    R, C = seq.rotations, seq.centers
    for f in range(0, len(C) - stride, stride):
        g = f + stride
        a_ids, _ = seq.table.observations_at(f)
        b_ids, _ = seq.table.observations_at(g)
        common = np.intersect1d(a_ids, b_ids)
        if len(common) == 0:
            continue
        X = np.array([seq.points[int(t)] for t in common])
        d1 = X - C[f]
        d2 = X - C[g]
        cos = np.sum(d1 * d2, axis=1) / (np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1))
        angles.append(np.arccos(np.clip(cos, -1, 1)))
    return float(np.mean(np.concatenate(angles))) if angles else 0.0
