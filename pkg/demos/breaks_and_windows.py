"""Breaks: a visibility gap and degenerate tiny windows.

A stretch of frames with no observations leaves nothing to connect the
keyframes after it to the map, so a new segment starts and one break is
counted. Windows of two keyframes have a single edge, too little parallax to
fix its direction, and no track seen three times, so every window is
underconstrained and the whole run is lost.
"""
import logging

from winslam.evaluation import evaluate_map
from winslam.pipeline import PipelineConfig, run_pipeline
from winslam.synthetic import MotionProfile, generate_sequence, make_scene

logging.basicConfig(level=logging.ERROR)


def run(gap=None, **cfg):
    profile = MotionProfile("egomotion", 6.0 if gap else 3.7, seed=1)
    seq = generate_sequence(make_scene(profile, seed=1), profile, noise_px=0.5, seed=1, gap=gap)
    res = run_pipeline(seq.table, seq.intrinsics, dict(enumerate(seq.timestamps)), PipelineConfig(**cfg))
    failed = sum(bool(w.failure) for w in res.windows)
    text = f"breaks {res.breaks} at frames {res.gmap.breaks}, {failed}/{len(res.windows)} windows failed"
    if res.gmap.cameras:
        ate, depth = evaluate_map(res.gmap, seq.timestamps, seq.centers, seq.points, seq.rotations)
        text += f", ATE {100 * ate:.2f} cm over {len(res.gmap.segments)} segment(s)"
    return text


print("default windows:         ", run())
print("gap of 50 frames at 80:  ", run(gap=(80, 50)))
print("two-keyframe windows:    ", run(w_min=2, w_max=2))
