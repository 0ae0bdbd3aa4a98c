"""Windowed monocular SLAM back-end for low-parallax, rotation-dominant video.

Keyframes are grouped into temporal windows. Each window is solved by
motion averaging (rotations, then translations from 2D constraints only),
linear triangulation and bundle adjustment, and windows are merged into a
global map with 7-dof alignment.
"""
from .geometry import CameraIntrinsics
from .pipeline import PipelineConfig, PipelineResult, run_pipeline

__all__ = ["CameraIntrinsics", "PipelineConfig", "PipelineResult", "run_pipeline"]
__version__ = "0.1.0"
