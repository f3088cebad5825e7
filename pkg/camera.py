#!/usr/bin/env python3

"""Projective camera: pose splines, gyro preintegration, ray generation and plane projection"""

from dataclasses import dataclass, field
import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from diffcore import Tensor, as_tensor, concat, matmul, precision, reshape
from spline import spline_eval_batch

DEFAULT_ETA_R = 0.01
MIN_POSE_POINTS = 4
DEGENERATE_Z = 1e-9
ON_PLANE = 1e-6


def check_intrinsics(K):
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (3, 3):
        raise ValueError(f"intrinsics must be 3x3, got shape {K.shape}")
    if K[0, 0] <= 0 or K[1, 1] <= 0:
        raise ValueError(f"intrinsics focal entries must be positive, got {K[0, 0]}, {K[1, 1]}")
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("intrinsics matrix is singular")
    return K


def view_bounds(K):
    """Plane extents (x0, y0, x1, y1) at unit depth of the image corners (0,0) and (1,1)"""
    Kinv = np.linalg.inv(check_intrinsics(K))
    lo = Kinv @ np.array([0.0, 0.0, 1.0])
    hi = Kinv @ np.array([1.0, 1.0, 1.0])
    return (lo[0] / lo[2], lo[1] / lo[2], hi[0] / hi[2], hi[1] / hi[2])


@dataclass
class Plane:
    depth: float
    axis_u: tuple = (1.0, 0.0, 0.0)
    axis_v: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError(f"plane depth must be positive, got {self.depth}")
        u, v = np.asarray(self.axis_u, dtype=np.float64), np.asarray(self.axis_v, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ValueError("plane axes must be orthonormal")

    @property
    def axes(self):
        return np.stack([self.axis_u, self.axis_v], axis=1)  # (3, 2)


def pose_points(frame_count):
    return max(MIN_POSE_POINTS, frame_count // 3)


@dataclass
class PoseModel:
    translation: object  # (P, 3) array or Tensor
    rotation: object  # (P, 3) array or Tensor
    eta_R: float = DEFAULT_ETA_R
    device_rotations: np.ndarray = None  # (F, 3, 3)
    frame_times: np.ndarray = None  # (F,)
    mode: str = 'cubic'
    _slerp: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.device_rotations is None:
            self.device_rotations = np.eye(3)[None]
            self.frame_times = np.zeros(1)
        if self.frame_times is None:
            self.frame_times = np.linspace(0.0, 1.0, len(self.device_rotations))
        self.device_rotations = np.asarray(self.device_rotations, dtype=np.float64)
        self.frame_times = np.asarray(self.frame_times, dtype=np.float64)
        if len(self.frame_times) != len(self.device_rotations):
            raise ValueError(f"{len(self.device_rotations)} device rotations for {len(self.frame_times)} frame times")
        for i, R in enumerate(self.device_rotations):
            if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
                raise ValueError(f"device rotation {i} is not a proper rotation")
        if len(self.frame_times) > 1:
            self._slerp = Slerp(self.frame_times, Rotation.from_matrix(self.device_rotations))


def zero_pose(frame_count, device_rotations=None, frame_times=None, eta_R=DEFAULT_ETA_R, mode='cubic'):
    n = pose_points(frame_count)
    return PoseModel(np.zeros((n, 3), dtype=np.float32), np.zeros((n, 3), dtype=np.float32),
                     eta_R, device_rotations, frame_times, mode)


def integrate_gyro(sample_times, omega, frame_times):
    """
    Per-frame device rotations from angular-velocity samples, relative to frame 0.

    Args:
        sample_times: (S,) sorted sample timestamps, or None/empty when no gyro stream exists
        omega: (S, 3) angular velocity in rad per time unit (device frame)
        frame_times: (F,) sorted frame timestamps

    Returns:
        (F, 3, 3) rotation matrices; identities without gyro data
    """
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if np.any(np.diff(frame_times) < 0):
        raise ValueError("frame timestamps must be sorted")
    F = len(frame_times)
    if sample_times is None or len(sample_times) == 0:
        return np.tile(np.eye(3), (F, 1, 1))
    sample_times = np.asarray(sample_times, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64).reshape(-1, 3)
    if np.any(np.diff(sample_times) < 0):
        raise ValueError("gyro sample timestamps must be sorted")
    if len(omega) != len(sample_times):
        raise ValueError(f"{len(omega)} gyro samples for {len(sample_times)} timestamps")

    steps = Rotation.from_rotvec(omega[:-1] * np.diff(sample_times)[:, None])
    at_samples = [Rotation.identity()]
    for step in steps:
        at_samples.append(at_samples[-1] * step)

    idx = np.clip(np.searchsorted(sample_times, frame_times, side='right') - 1, 0, len(sample_times) - 1)
    at_frames = [at_samples[i] * Rotation.from_rotvec(omega[i] * (tf - sample_times[i]))
                 for i, tf in zip(idx, frame_times)]
    ref = at_frames[0].inv()
    return np.stack([(ref * r).as_matrix() for r in at_frames])


def device_rotation_at(t, pose):
    """R^D at times t (N,), slerped between bracketing frames and exact at frame times"""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if pose._slerp is None:
        return np.broadcast_to(pose.device_rotations[0], (len(t), 3, 3)).copy()
    clamped = np.clip(t, pose.frame_times[0], pose.frame_times[-1])
    out = pose._slerp(clamped).as_matrix()
    pos = np.searchsorted(pose.frame_times, clamped)
    pos = np.clip(pos, 0, len(pose.frame_times) - 1)
    exact = pose.frame_times[pos] == clamped
    out[exact] = pose.device_rotations[pos[exact]]
    return out


def skew(r):
    a, b, c = r
    return np.array([[0.0, -c, b], [c, 0.0, -a], [-b, a, 0.0]])


def eval_pose(t, pose):
    """(T, R) at a single time t: T from the translation spline, R = R^D(t) + eta_R * skew(rotation spline)"""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"pose time must be in [0, 1], got {t}")
    T = spline_eval_batch(np.array([t]), pose.translation, pose.mode).data[0]
    r = spline_eval_batch(np.array([t]), pose.rotation, pose.mode).data[0]
    R = device_rotation_at(t, pose)[0] + pose.eta_R * skew(r)
    return T, R


def _cross(r, k):
    """r x k for a (N,3) Tensor r and a constant (N,3) array k"""
    rx, ry, rz = r[:, 0:1], r[:, 1:2], r[:, 2:3]
    kx, ky, kz = k[:, 0:1], k[:, 1:2], k[:, 2:3]
    return concat([ry * kz - rz * ky, rz * kx - rx * kz, rx * ky - ry * kx], axis=1)


def pixel_directions(u, v, K):
    K = check_intrinsics(K)
    uv1 = np.stack([np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), np.ones(np.shape(u))], axis=-1)
    return np.linalg.solve(K, uv1.T).T


def pose_rays(u, v, t, K, pose, translation=None, rotation=None):
    """
    Rays for N pixels at N times.

    Args:
        u, v, t: (N,) normalized pixel coordinates and times
        K: 3x3 intrinsics
        pose: PoseModel
        translation, rotation: optional Tensors overriding the pose control points (for gradients)

    Returns:
        (O, D) Tensors of shape (N, 3), with D_z = 1
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    translation = pose.translation if translation is None else translation
    rotation = pose.rotation if rotation is None else rotation
    k = pixel_directions(u, v, K).reshape(-1, 3)
    RD = device_rotation_at(t, pose)
    base = np.einsum('nij,nj->ni', RD, k)

    O = spline_eval_batch(t, translation, pose.mode)
    d = base
    if pose.eta_R != 0:
        r = spline_eval_batch(t, rotation, pose.mode)
        d = _cross(r, k) * pose.eta_R + base
    d = as_tensor(d)
    dz = d[:, 2:3]
    if np.any(np.abs(dz.data) < DEGENERATE_Z):
        raise ValueError("degenerate ray: direction z component is below 1e-9")
    return O, d / dz


def project_planes(O, D, plane):
    """Plane coordinates (N, 2) of rays (O, D), scaled by ray length so zero-origin rays are depth-invariant"""
    O, D = as_tensor(O), as_tensor(D)
    s = plane.depth - O[:, 2:3]
    if np.any(s.data <= ON_PLANE):
        raise ValueError(f"camera on or behind plane at depth {plane.depth}")
    Q = O + s * D
    return matmul(Q, plane.axes) / s


def generate_ray(u, v, t, K, pose):
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"pixel coordinates must be in [0, 1], got ({u}, {v})")
    with precision(np.float64):
        O, D = pose_rays(np.array([u]), np.array([v]), np.array([t]), K, pose)
    return O.data[0], D.data[0]


def project_plane(O, D, plane):
    with precision(np.float64):
        uv = project_planes(reshape(Tensor(O), (1, 3)), reshape(Tensor(D), (1, 3)), plane)
    return float(uv.data[0, 0]), float(uv.data[0, 1])
