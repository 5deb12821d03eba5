"""Drives an estimator over synthesized or replayed sensor streams."""

from __future__ import annotations

import numpy as np

from . import estimator as est
from .estimator import EstimatorConfig, ManifoldEstimator


def run_estimator(truth_t0, p0, R0, odom_samples, cam_frames, config: EstimatorConfig, noise):
    """Run the sliding-window estimator over aligned sensor streams.

    The estimator initializes at the first camera frame (known initial pose,
    as in the simulation protocol) and produces one record per subsequent
    keyframe.  Returns the list of per-keyframe records.
    """
    engine = ManifoldEstimator(config, noise, float(cam_frames[0].t), p0, R0)
    est.attach_camera(engine.window, engine.window.head_id, cam_frames[0])

    records = []
    odom_idx = 0
    n_odom = len(odom_samples)
    for frame in cam_frames[1:]:
        t_target = float(frame.t)
        batch = []
        while odom_idx < n_odom and odom_samples[odom_idx].t < t_target - 1e-9:
            batch.append(odom_samples[odom_idx])
            odom_idx += 1
        records.append(engine.process(batch, frame))
    return records
