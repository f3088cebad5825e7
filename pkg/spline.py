#!/usr/bin/env python3

"""Uniform temporal splines over control points: cubic Hermite with finite-difference tangents, or linear"""

from dataclasses import dataclass
import numpy as np

from diffcore import as_tensor, gather, reshape

MODES = ('cubic', 'linear')
MIN_POINTS = {'cubic': 2, 'linear': 1}


@dataclass
class SplineTrack:
    control_points: object  # (P, d) array or Tensor
    mode: str = 'cubic'

    def __post_init__(self):
        if self.control_points.ndim != 2:
            raise ValueError(f"control points must be (P, d), got shape {tuple(self.control_points.shape)}")
        check_mode(self.mode, self.control_points.shape[0])
        if not np.all(np.isfinite(as_tensor(self.control_points).data)):
            raise ValueError("control points must be finite")


def check_mode(mode, count):
    if mode not in MODES:
        raise ValueError(f"unknown spline mode '{mode}', expected one of {MODES}")
    if count < MIN_POINTS[mode]:
        raise ValueError(f"{mode} spline needs at least {MIN_POINTS[mode]} control points, got {count}")


def spline_eval(t, track):
    """Value of the track at t in [0, 1] as a d-vector Tensor"""
    value = spline_eval_batch(np.array([t]), track.control_points, track.mode)
    return reshape(value, (value.shape[1],))


def spline_eval_batch(t, points, mode='cubic'):
    """
    Evaluate splines at times t.

    Args:
        t: (N,) times in [0, 1]
        points: (P, d) control points shared by all N, or (N, P, d) per-sample control points
        mode: 'cubic' or 'linear'

    Returns:
        (N, d) Tensor, differentiable w.r.t. points and t
    """
    points = as_tensor(points)
    t = as_tensor(t)
    if t.ndim != 1:
        t = reshape(t, (-1,))
    if np.any(t.data < 0.0) or np.any(t.data > 1.0):
        bad = t.data[(t.data < 0.0) | (t.data > 1.0)][0]
        raise ValueError(f"spline time must be in [0, 1], got {bad}")
    shared = points.ndim == 2
    P, d = points.shape[-2], points.shape[-1]
    N = t.shape[0]
    check_mode(mode, P)
    if not shared and points.shape[0] != N:
        raise ValueError(f"got {points.shape[0]} control-point sets for {N} times")

    flat = points if shared else reshape(points, (N * P, d))
    base = 0 if shared else np.arange(N, dtype=np.int64) * P

    def row(idx):
        return gather(flat, base + np.clip(idx, 0, P - 1))

    if P == 1:
        return row(np.zeros(N, dtype=np.int64))

    ts = t * float(P - 1)
    k = np.clip(np.floor(ts.data), 0, P - 2).astype(np.int64)
    tr = reshape(ts - k, (N, 1))
    p0, p1 = row(k), row(k + 1)
    if mode == 'linear':
        return p0 + tr * (p1 - p0)

    m0 = (p1 - row(k - 1)) * 0.5
    m1 = (row(k + 2) - p0) * 0.5
    tr2 = tr * tr
    tr3 = tr2 * tr
    h00 = 2.0 * tr3 - 3.0 * tr2 + 1.0
    h10 = tr3 - 2.0 * tr2 + tr
    h01 = 3.0 * tr2 - 2.0 * tr3
    h11 = tr3 - tr2
    return h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
