#!/usr/bin/env python3

"""Burst container, bundle I/O, procedural synthetic bursts with ground truth, tonemapping and PNG export"""

import json
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import cv2
import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from diffcore import precision
from camera import Plane, PoseModel, check_intrinsics, pose_rays, project_planes, view_bounds
from utils import NumpyEncoder, run_chunks

BUNDLE_VERSION = 1
REQUIRED_META = ('version', 'width', 'height', 'frame_count', 'timestamps', 'intrinsics', 'device_rotations')
GROUND_TRUTH_CHANNELS = {'transmission': 3, 'obstruction': 3, 'alpha': 1}
TEXTURES = ('gradient', 'checker', 'noise', 'solid', 'mix', 'waves')
WAVES_MAX_CYCLES = 1.5
ALPHA_KINDS = ('none', 'uniform', 'bars', 'grid', 'blob')
DEFAULT_GAMMA = 2.2
EDGE_SOFTNESS = 0.004


@dataclass
class Burst:
    frames: np.ndarray  # (F, H, W, 3) linear RGB
    timestamps: np.ndarray  # (F,) in [0, 1]
    intrinsics: np.ndarray  # (3, 3)
    device_rotations: np.ndarray = None  # (F, 3, 3)
    ground_truth: dict = None  # transmission, obstruction (H,W,3), alpha (H,W), trajectory (F,6)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.intrinsics = check_intrinsics(self.intrinsics)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or len(self.frames) == 0:
            raise ValueError(f"frames must be a non-empty (F, H, W, 3) stack, got shape {self.frames.shape}")
        F = len(self.frames)
        if self.timestamps.shape != (F,):
            raise ValueError(f"{len(self.timestamps)} timestamps for {F} frames")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.timestamps[0] != 0.0 or (F > 1 and self.timestamps[-1] != 1.0):
            raise ValueError(f"timestamps must run from 0 to 1, got {self.timestamps[0]} .. {self.timestamps[-1]}")
        if not np.all(np.isfinite(self.frames)) or self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("frame pixels must be finite and in [0, 1]")
        if self.device_rotations is None:
            self.device_rotations = np.tile(np.eye(3), (F, 1, 1))
        self.device_rotations = np.asarray(self.device_rotations, dtype=np.float64).reshape(F, 3, 3)

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


def bilinear_read(frames, frame_idx, u, v):
    """Colors (N, 3) at continuous normalized positions; pixel x has its center at u = (x + 0.5) / W"""
    H, W = frames.shape[1:3]
    x = np.clip(np.asarray(u, dtype=np.float64) * W - 0.5, 0, W - 1)
    y = np.clip(np.asarray(v, dtype=np.float64) * H - 0.5, 0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = frames[frame_idx, y0, x0] * (1 - fx) + frames[frame_idx, y0, x1] * fx
    bottom = frames[frame_idx, y1, x0] * (1 - fx) + frames[frame_idx, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def select_frames(burst, selection):
    """
    Subset a burst: 'all', 'even:N' (N frames evenly spanning the capture), 'first:N', or 'every:K'.
    Timestamps are renormalized to [0, 1]; device rotations are re-expressed relative to the first kept frame.
    """
    F = burst.frame_count
    if selection in (None, '', 'all'):
        return burst
    mode, _, count = selection.partition(':')
    try:
        n = int(count)
    except ValueError:
        raise ValueError(f"frame selection '{selection}' needs an integer after ':'") from None
    if n < 1:
        raise ValueError(f"frame selection count must be >= 1, got {n}")
    if mode == 'even':
        idx = np.unique(np.round(np.linspace(0, F - 1, min(n, F))).astype(int))
    elif mode == 'first':
        idx = np.arange(min(n, F))
    elif mode == 'every':
        idx = np.arange(0, F, n)
    else:
        raise ValueError(f"unknown frame selection '{mode}', expected even, first or every")

    t = burst.timestamps[idx]
    span = t[-1] - t[0]
    t = (t - t[0]) / span if span > 0 else np.zeros(1)
    if len(t) > 1:
        t[-1] = 1.0
    ref = burst.device_rotations[idx[0]].T
    rotations = np.einsum('ij,njk->nik', ref, burst.device_rotations[idx])
    ground_truth = None
    if burst.ground_truth is not None:
        ground_truth = dict(burst.ground_truth)
        if 'trajectory' in ground_truth:
            ground_truth['trajectory'] = ground_truth['trajectory'][idx]
    return Burst(burst.frames[idx], t, burst.intrinsics, rotations, ground_truth)


# ---------------------------------------------------------------- bundle I/O

def save_bundle(burst, path):
    path = Path(path)
    (path / 'frames').mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(burst.frames):
        (path / 'frames' / f"frame_{i:04d}.f32").write_bytes(np.ascontiguousarray(frame, dtype='<f4').tobytes())
    meta = {
        'version': BUNDLE_VERSION,
        'width': burst.width,
        'height': burst.height,
        'frame_count': burst.frame_count,
        'timestamps': burst.timestamps.tolist(),
        'intrinsics': burst.intrinsics.reshape(-1).tolist(),
        'device_rotations': burst.device_rotations.reshape(-1, 9).tolist(),
    }
    if burst.ground_truth:
        (path / 'ground_truth').mkdir(exist_ok=True)
        meta['ground_truth'] = {}
        for name, image in burst.ground_truth.items():
            rel = f"ground_truth/{name}.f32"
            (path / rel).write_bytes(np.ascontiguousarray(image, dtype='<f4').tobytes())
            meta['ground_truth'][name] = rel
    (path / 'meta.json').write_text(json.dumps(meta, indent=2, cls=NumpyEncoder), encoding='utf-8')
    print(f"[BUNDLE] Saved {burst.frame_count} frames {burst.width}x{burst.height} to {path}")


def _read_f32(file, count, what):
    raw = Path(file).read_bytes()
    if len(raw) < count * 4:
        raise ValueError(f"truncated {what}: {file} has {len(raw)} bytes, expected {count * 4}")
    if len(raw) > count * 4:
        raise ValueError(f"size mismatch for {what}: {file} has {len(raw)} bytes, expected {count * 4}")
    return np.frombuffer(raw, dtype='<f4').astype(np.float32)


def load_bundle(path):
    path = Path(path)
    meta_file = path / 'meta.json'
    if not meta_file.exists():
        raise ValueError(f"bundle {path} has no meta.json")
    try:
        meta = json.loads(meta_file.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt bundle metadata: {e}") from None
    for key in REQUIRED_META:
        if key not in meta:
            raise ValueError(f"bundle metadata missing '{key}'")
    if meta['version'] != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {meta['version']}")
    W, H, F = int(meta['width']), int(meta['height']), int(meta['frame_count'])
    if len(meta['intrinsics']) != 9:
        raise ValueError(f"intrinsics must have 9 entries, got {len(meta['intrinsics'])}")
    if np.shape(meta['device_rotations']) != (F, 9):
        raise ValueError(f"device_rotations must be {F}x9, got {np.shape(meta['device_rotations'])}")

    frames = np.stack([_read_f32(path / 'frames' / f"frame_{i:04d}.f32", H * W * 3, f"frame {i}").reshape(H, W, 3)
                       for i in range(F)])
    ground_truth = None
    if meta.get('ground_truth'):
        ground_truth = {}
        for name, rel in meta['ground_truth'].items():
            if name == 'trajectory':
                ground_truth[name] = _read_f32(path / rel, F * 6, name).reshape(F, 6)
            elif name in GROUND_TRUTH_CHANNELS:
                c = GROUND_TRUTH_CHANNELS[name]
                image = _read_f32(path / rel, H * W * c, name)
                ground_truth[name] = image.reshape(H, W, 3) if c == 3 else image.reshape(H, W)
            else:
                raise ValueError(f"unknown ground truth entry '{name}'")
    burst = Burst(frames, np.asarray(meta['timestamps'], dtype=np.float64),
                  np.asarray(meta['intrinsics'], dtype=np.float64).reshape(3, 3),
                  np.asarray(meta['device_rotations'], dtype=np.float64).reshape(F, 3, 3), ground_truth)
    print(f"[BUNDLE] Loaded {F} frames {W}x{H} from {path}")
    return burst


# ---------------------------------------------------------------- synthetic bursts

@dataclass
class SynthSpec:
    width: int = 128
    height: int = 96
    frame_count: int = 42
    transmission: str = 'mix'
    obstruction: str = 'noise'
    alpha: str = 'bars'
    alpha_value: float = 1.0
    coverage: float = 0.25
    bar_count: int = 6
    transmission_depth: float = 1.0
    obstruction_depth: float = 0.5
    translation_amplitude: float = 0.03
    rotation_amplitude: float = 0.002
    focal: float = 1.0
    noise: float = 0.0
    seed: int = 0
    gyro: bool = True
    knots: int = 6

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.frame_count < 1:
            raise ValueError(f"synthetic burst needs positive size and frame count, got {self.width}x{self.height}x{self.frame_count}")
        if self.transmission not in TEXTURES or self.obstruction not in TEXTURES:
            raise ValueError(f"unknown texture, expected one of {TEXTURES}")
        if self.alpha not in ALPHA_KINDS:
            raise ValueError(f"unknown alpha kind '{self.alpha}', expected one of {ALPHA_KINDS}")
        if self.transmission_depth <= 0 or self.obstruction_depth <= 0:
            raise ValueError("plane depths must be positive")
        if self.transmission_depth == self.obstruction_depth:
            raise ValueError("plane depths must differ")
        if self.translation_amplitude < 0 or self.rotation_amplitude < 0 or self.noise < 0:
            raise ValueError("amplitudes and noise must be non-negative")
        if not 0 <= self.coverage <= 1 or not 0 <= self.alpha_value <= 1:
            raise ValueError("coverage and alpha_value must be in [0, 1]")
        if self.knots < 2:
            raise ValueError(f"trajectory needs at least 2 knots, got {self.knots}")

    @property
    def intrinsics(self):
        return np.array([[self.focal, 0.0, 0.5],
                         [0.0, self.focal * self.width / self.height, 0.5],
                         [0.0, 0.0, 1.0]])


def synth_spec_from_dict(values):
    known = {f.name for f in fields(SynthSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown synthetic spec keys {unknown}")
    return SynthSpec(**values)


def _texture(kind, rng):
    """Procedural RGB texture over canonical coords, values kept inside [0.05, 0.95]"""
    if kind == 'mix':
        parts = [_texture(k, rng) for k in ('gradient', 'checker', 'noise')]
        return lambda x, y: 0.4 * parts[0](x, y) + 0.3 * parts[1](x, y) + 0.3 * parts[2](x, y)
    if kind == 'solid':
        color = rng.uniform(0.1, 0.9, 3)
        return lambda x, y: np.broadcast_to(color, np.shape(x) + (3,)).copy()
    if kind == 'waves':
        # at most WAVES_MAX_CYCLES per canonical unit, so bilinear reads between pixel centers stay on the surface
        base = rng.uniform(0.35, 0.65, 3)
        waves = []
        for _ in range(3):
            direction = rng.normal(size=2)
            waves.append((rng.uniform(0.5, WAVES_MAX_CYCLES), direction / np.linalg.norm(direction),
                          rng.uniform(0.0, 2 * np.pi), rng.uniform(0.03, 0.1, 3)))

        def wave_sum(x, y):
            out = np.broadcast_to(base, np.shape(x) + (3,)).copy()
            for cycles, direction, phase, amplitude in waves:
                arg = 2 * np.pi * cycles * (direction[0] * np.asarray(x) + direction[1] * np.asarray(y)) + phase
                out += np.sin(arg)[..., None] * amplitude
            return out
        return wave_sum
    if kind == 'gradient':
        a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(-0.35, 0.35, (2, 3))
        return lambda x, y: np.clip(a + x[..., None] * b[0] + y[..., None] * b[1], 0.05, 0.95)
    if kind == 'checker':
        c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
        n = rng.integers(3, 7)

        def checker(x, y):
            s = 0.5 + 0.5 * np.tanh(8.0 * np.sin(2 * np.pi * n * x) * np.sin(2 * np.pi * n * y))
            return c0 + s[..., None] * (c1 - c0)
        return checker
    # noise: sinusoid octaves per channel
    octaves = [(2.0 ** o, rng.uniform(0, 2 * np.pi, (3, 2)), rng.normal(size=(3, 2))) for o in range(1, 5)]
    base = rng.uniform(0.3, 0.7, 3)

    def noise(x, y):
        out = np.zeros(np.shape(x) + (3,))
        for freq, phase, direction in octaves:
            for c in range(3):
                arg = 2 * np.pi * freq * (direction[c, 0] * x + direction[c, 1] * y)
                out[..., c] += np.sin(arg + phase[c, 0]) * np.cos(2 * np.pi * freq * y + phase[c, 1]) / freq
        return np.clip(base + 0.25 * out, 0.05, 0.95)
    return noise


def _bars(x, count, coverage):
    period = 1.2 / count
    phase = np.mod((x + 0.1) / period, 1.0)
    distance = np.abs(phase - 0.5) * period
    return np.clip((0.5 * coverage * period - distance) / EDGE_SOFTNESS + 0.5, 0.0, 1.0)


def _alpha(spec, rng):
    if spec.alpha == 'none':
        return lambda x, y: np.zeros(np.shape(x))
    if spec.alpha == 'uniform':
        return lambda x, y: np.full(np.shape(x), spec.alpha_value)
    if spec.alpha == 'bars':
        return lambda x, y: spec.alpha_value * _bars(x, spec.bar_count, spec.coverage)
    if spec.alpha == 'grid':
        per_axis = 1.0 - np.sqrt(1.0 - spec.coverage)
        return lambda x, y: spec.alpha_value * np.maximum(_bars(x, spec.bar_count, per_axis),
                                                          _bars(y, spec.bar_count, per_axis))
    center = rng.uniform(0.3, 0.7, 2)
    radius = np.sqrt(spec.coverage / np.pi)
    return lambda x, y: spec.alpha_value * np.clip(
        (radius - np.hypot(x - center[0], y - center[1])) / (4 * EDGE_SOFTNESS) + 0.5, 0.0, 1.0)


def _shake(times, knots, amplitudes, rng):
    """Smooth random track through seeded knots, zero at the first frame, per-axis peak-to-peak = amplitude"""
    knot_times = np.linspace(0.0, 1.0, knots)
    track = CubicSpline(knot_times, rng.normal(size=(knots, 3)), axis=0)(times)
    track = track - track[0]
    span = np.ptp(track, axis=0)
    return track * np.divide(amplitudes, span, out=np.zeros(3), where=span > 0)


def synth_burst(spec):
    """Render a burst from a procedural two-plane scene under a random hand-shake trajectory"""
    started = time.time()
    rng = np.random.default_rng(spec.seed)
    F, W, H = spec.frame_count, spec.width, spec.height
    times = np.linspace(0.0, 1.0, F) if F > 1 else np.zeros(1)
    transmission = _texture(spec.transmission, rng)
    obstruction = _texture(spec.obstruction, rng)
    alpha = _alpha(spec, rng)

    a, r = spec.translation_amplitude, spec.rotation_amplitude
    translation = _shake(times, spec.knots, np.array([a, a, 0.25 * a]), rng)
    rotvec = _shake(times, spec.knots, np.array([r, r, r]), rng)
    rotations = Rotation.from_rotvec(rotvec).as_matrix()
    K = spec.intrinsics
    x0, y0, x1, y1 = view_bounds(K)
    pose = PoseModel(translation, np.zeros((max(F, 1), 3)), 0.0, rotations, times, 'linear')
    planes = {'transmission': Plane(spec.transmission_depth), 'obstruction': Plane(spec.obstruction_depth)}

    ys, xs = np.mgrid[0:H, 0:W]
    u = ((xs + 0.5) / W).reshape(-1)
    v = ((ys + 0.5) / H).reshape(-1)

    def render(f):
        with precision(np.float64):
            O, D = pose_rays(u, v, np.full(u.shape, times[f]), K, pose)
            coords = {name: (project_planes(O, D, plane).data - [x0, y0]) / [x1 - x0, y1 - y0]
                      for name, plane in planes.items()}
        cT = transmission(*coords['transmission'].T)
        cO = obstruction(*coords['obstruction'].T)
        a_ = alpha(*coords['obstruction'].T)[:, None]
        return ((1 - a_) * cT + a_ * cO).reshape(H, W, 3)

    frames = np.stack(run_chunks(render, range(F)))
    if spec.noise > 0:
        frames = np.clip(frames + rng.normal(0.0, spec.noise, frames.shape), 0.0, 1.0)

    gx, gy = (u - 0.5) / K[0, 0] - x0, (v - 0.5) / K[1, 1] - y0
    gx, gy = gx / (x1 - x0), gy / (y1 - y0)
    ground_truth = {
        'transmission': transmission(gx, gy).reshape(H, W, 3).astype(np.float32),
        'obstruction': obstruction(gx, gy).reshape(H, W, 3).astype(np.float32),
        'alpha': alpha(gx, gy).reshape(H, W).astype(np.float32),
        'trajectory': np.concatenate([translation, rotvec], axis=1).astype(np.float32),
    }
    device_rotations = rotations if spec.gyro else None
    print(f"[SYNTH] Rendered {F} frames {W}x{H} in {time.time() - started:.1f}s")
    return Burst(frames.astype(np.float32), times, K, device_rotations, ground_truth)


# ---------------------------------------------------------------- display

def tonemap(image, gamma=DEFAULT_GAMMA):
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.power(np.clip(image, 0.0, 1.0), 1.0 / gamma)


def write_png(path, image, gamma=DEFAULT_GAMMA):
    """16-bit PNG of a linear (H,W), (H,W,3) or (H,W,4) image; a fourth channel is written untonemapped as alpha"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 4:
        display = np.concatenate([tonemap(image[..., :3], gamma), np.clip(image[..., 3:], 0, 1)], axis=2)
    else:
        display = tonemap(image, gamma)
    data = np.round(display * 65535).astype(np.uint16)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGBA2BGRA if data.shape[2] == 4 else cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(os.fspath(path), data):
        raise ValueError(f"could not write image {path}")


def read_png(path, gamma=1.0):
    """PNG as floats in [0, 1] (RGB order); gamma != 1 undoes a display tonemap"""
    data = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ValueError(f"could not read image {path}")
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_BGRA2RGBA if data.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    image = data.astype(np.float64) / scale
    return np.power(image, gamma) if gamma != 1.0 else image
