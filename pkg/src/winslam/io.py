"""Text formats: trajectories, point clouds, intrinsics, ground-truth points."""
import numpy as np

from .geometry import CameraIntrinsics, matrix_to_quat, quat_to_matrix


class FormatError(ValueError):
    """A file does not follow the expected line format."""


def _rows(path, n_fields, min_fields=None):
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != n_fields and not (min_fields and len(parts) >= min_fields):
                raise FormatError(f"{path}:{n}: expected {n_fields} fields, got {len(parts)}")
            try:
                out.append([float(p) for p in parts])
            except ValueError as err:
                raise FormatError(f"{path}:{n}: {err}") from err
    return np.array(out, dtype=float)


def write_tum(path, timestamps, rotations, centers):
    """``timestamp tx ty tz qx qy qz qw``; rotations are world-to-camera.

    The stored pose is camera-to-world (position = centre, orientation =
    R^T), as is customary for this format.
    """
    with open(path, "w") as fh:
        for t, R, C in zip(timestamps, rotations, centers):
            w, x, y, z = matrix_to_quat(np.asarray(R).T)
            vals = (t, C[0], C[1], C[2], x, y, z, w)
            fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def read_tum(path):
    """Returns ``(timestamps, rotations (world-to-camera), centres)``."""
    a = _rows(path, 8).reshape(-1, 8)
    R = np.array([quat_to_matrix(np.array([q[3], q[0], q[1], q[2]])).T for q in a[:, 4:8]]).reshape(-1, 3, 3)
    return a[:, 0], R, a[:, 1:4]


def read_kitti_poses(path, fps=10.0):
    """KITTI odometry poses (3x4 camera-to-world per line), timestamps index/fps."""
    a = _rows(path, 12).reshape(-1, 3, 4)
    R = np.swapaxes(a[:, :, :3], 1, 2)
    return np.arange(len(a)) / fps, R, a[:, :, 3].copy()


def write_ply(path, points):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line.strip() == "end_header":
            body = lines[k + 1 : k + 1 + (n or 0)]
            return np.array([[float(v) for v in b.split()[:3]] for b in body]).reshape(-1, 3)
    raise FormatError(f"{path}: missing end_header")


def write_points(path, points):
    """``track_id X Y Z`` lines, sorted by track id."""
    with open(path, "w") as fh:
        for tid in sorted(points):
            X = points[tid]
            fh.write(f"{tid} {X[0]:.17g} {X[1]:.17g} {X[2]:.17g}\n")


def read_points(path):
    a = _rows(path, 4).reshape(-1, 4)
    return {int(r[0]): r[1:4].copy() for r in a}


def read_key_values(path):
    """``key = value`` lines; ``#`` starts a comment. Returns an ordered dict."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise FormatError(f"{path}:{n}: expected 'key = value'")
            k, v = (p.strip() for p in s.split("=", 1))
            if not k:
                raise FormatError(f"{path}:{n}: empty key")
            out[k] = v
    return out


INTRINSIC_KEYS = ("focal", "cx", "cy", "r", "width", "height")


def read_intrinsics(path):
    """Intrinsics file: ``focal``, ``cx``, ``cy`` and optional ``r``, ``width``, ``height``.

    Returns ``(CameraIntrinsics, (width, height) or None)``.
    """
    kv = read_key_values(path)
    unknown = set(kv) - set(INTRINSIC_KEYS)
    if unknown:
        raise FormatError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        intr = CameraIntrinsics(float(kv["focal"]), float(kv["cx"]), float(kv["cy"]), float(kv.get("r", 0.0)))
    except KeyError as err:
        raise FormatError(f"{path}: missing {err.args[0]}") from err
    size = (int(kv["width"]), int(kv["height"])) if "width" in kv and "height" in kv else None
    return intr, size


def write_intrinsics(path, intr, size=None):
    with open(path, "w") as fh:
        fh.write(f"focal = {intr.focal:.17g}\ncx = {intr.cx:.17g}\ncy = {intr.cy:.17g}\nr = {intr.r:.17g}\n")
        if size is not None:
            fh.write(f"width = {size[0]}\nheight = {size[1]}\n")
