"""Minimal five-point essential matrix solver (OpenCV backend)."""
import cv2
import numpy as np


def essential_five_point(x1, x2):
    """All essential matrices consistent with five normalized correspondences.

    Returns a list of up to 10 unit-norm (3, 3) matrices; empty when the
    sample is degenerate.
    """
    x1 = np.ascontiguousarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.ascontiguousarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) != 5 or len(x2) != 5:
        raise ValueError("the five-point solver takes exactly five correspondences")
    # with exactly five points OpenCV returns every root, stacked vertically
    E, _ = cv2.findEssentialMat(x1, x2, np.eye(3), method=cv2.LMEDS)
    if E is None:
        return []
    out = []
    for e in E.reshape(-1, 3, 3):
        n = np.linalg.norm(e)
        if np.isfinite(n) and n > 0:
            out.append(e / n)
    return out
