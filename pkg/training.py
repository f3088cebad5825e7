#!/usr/bin/env python3

"""Losses, ray sampling, Adam and the coarse-to-fine fit loop"""

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from diffcore import RowGradient, Tape, Tensor, abs_, as_tensor, mean, stop_gradient, tree_sum
from encoding import EncodingParams, coarse_mask
from mlp import topology
from camera import DEFAULT_ETA_R, Plane, zero_pose
from layers import FieldSpec, LayerModel, SceneModel, composite_rays, field_names, init_params
from data import bilinear_read
from presets import encoding_for, get_preset
from spline import MODES
from utils import UsageError, run_chunks

ALPHA_MODES = ('magnitude', 'segmentation')
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-15
TRACE_EVERY = 50


class FitAborted(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"fit aborted at step {step}: {message}")
        self.step = step


@dataclass
class FitConfig:
    preset: str = 'occlusion'
    steps: int = 6000
    rays_per_step: int = 2 ** 18
    lr_initial: float = 3e-3
    lr_final: float = 3e-4
    pose_lr_scale: float = 0.1
    eta_alpha: float = None
    alpha_mode: str = None
    tau: float = None
    depths: dict = None
    flow_points: dict = None
    eps: float = 1e-3
    seed: int = 0
    eta_R: float = DEFAULT_ETA_R
    encodings: dict = field(default_factory=dict)
    max_log2_table: int = None
    hidden_width: int = 64
    hidden_layers: int = 4
    coarse_to_fine: bool = True
    gradient_loss: bool = False
    gradient_weight: float = 1.0
    radius_start: float = 2.0
    radius_end: float = 0.25
    radius_decay_fraction: float = 0.4
    deterministic: bool = False
    chunk_size: int = 2048
    spline_mode: str = 'cubic'
    log_every: int = 50


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    row_steps: dict = field(default_factory=dict)  # per-row update counts of row-sparse tables
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def _merge_layer_values(name, preset_values, overrides, what):
    merged = dict(preset_values)
    for key, value in (overrides or {}).items():
        if key not in preset_values:
            raise UsageError(f"preset '{name}' has no layer '{key}' for {what}")
        merged[key] = value
    return merged


def resolve_config(config):
    """Fill preset-derived fields, apply overrides and caps, validate"""
    preset = get_preset(config.preset)
    if config.steps < 1 or config.rays_per_step < 1:
        raise UsageError(f"steps and rays_per_step must be >= 1, got {config.steps}, {config.rays_per_step}")
    if config.eps <= 0:
        raise UsageError(f"eps must be positive, got {config.eps}")
    if config.chunk_size < 1 or config.hidden_width < 1 or config.hidden_layers < 0:
        raise UsageError("chunk_size and hidden_width must be >= 1, hidden_layers >= 0")
    if config.spline_mode not in MODES:
        raise UsageError(f"unknown spline mode '{config.spline_mode}', expected one of {MODES}")

    depths = _merge_layer_values(config.preset, preset['depths'], config.depths, 'depths')
    flow_points = _merge_layer_values(config.preset, preset['flow_points'], config.flow_points, 'flow_points')
    alpha_mode = config.alpha_mode or preset['alpha_mode']
    if alpha_mode not in ALPHA_MODES:
        raise UsageError(f"unknown alpha mode '{alpha_mode}', expected one of {ALPHA_MODES}")
    if 'obstruction' in depths and depths['obstruction'] == depths['transmission']:
        raise UsageError("transmission and obstruction depths must differ")

    encodings = {}
    for name, size in preset['encodings'].items():
        override = (config.encodings or {}).get(name)
        base = asdict(encoding_for(size))
        if isinstance(override, str):
            base = asdict(encoding_for(override))
        elif isinstance(override, dict):
            base.update(override)
        if config.max_log2_table is not None:
            base['log2_table_size'] = min(base['log2_table_size'], config.max_log2_table)
        try:
            encodings[name] = asdict(EncodingParams(**base))
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad encoding for '{name}': {e}") from None
    unknown = sorted(set(config.encodings or {}) - set(preset['encodings']))
    if unknown:
        raise UsageError(f"preset '{config.preset}' has no fields {unknown}")

    return replace(config, depths=depths, flow_points=flow_points, encodings=encodings, alpha_mode=alpha_mode,
                   eta_alpha=preset['eta_alpha'] if config.eta_alpha is None else config.eta_alpha,
                   tau=preset['tau'] if config.tau is None else config.tau)


def init_scene(burst, config):
    """Fresh SceneModel for a resolved config: zero pose tracks, preset planes, seeded fields"""
    two_layer = 'obstruction' in config.depths
    out_dims = {'transmission.image': 3, 'obstruction.image': 3, 'alpha': 1,
                'transmission.flow': 2 * config.flow_points['transmission']}
    if two_layer:
        out_dims['obstruction.flow'] = 2 * config.flow_points['obstruction']
    fields = {}
    for name in field_names(two_layer):
        enc = EncodingParams(**config.encodings[name])
        fields[name] = FieldSpec(enc, topology(enc.output_dim, out_dims[name], config.hidden_width, config.hidden_layers))
    layers = {name: LayerModel(name, config.flow_points[name], Plane(config.depths[name])) for name in config.depths}
    pose = zero_pose(burst.frame_count, burst.device_rotations, burst.timestamps, config.eta_R, config.spline_mode)
    params = init_params(fields, pose, config.seed)
    return SceneModel(pose, layers['transmission'], layers.get('obstruction'), fields, params,
                      burst.intrinsics, burst.width, burst.height, config.tau, config.spline_mode)


def photometric_loss(c, c_hat, eps):
    """Mean |c - c_hat| / (sg(c) + eps) over batch and channels"""
    c = stop_gradient(c)
    return mean(abs_((c - c_hat) / (c + eps)))


def alpha_regularizer(alpha, mode):
    if mode == 'magnitude':
        return mean(abs_(alpha))
    if mode == 'segmentation':
        return mean(alpha * (1.0 - alpha))
    raise ValueError(f"unknown alpha mode '{mode}', expected one of {ALPHA_MODES}")


def gradient_loss(c, c_perturbed, c_hat, c_hat_perturbed, eps):
    """
    Mean ((dc - dc_hat) / (|sg(dc)| + eps))^2 over ray pairs, d = original minus perturbed partner.
    Partners come from perturb_batch.
    """
    dc = stop_gradient(as_tensor(c) - as_tensor(c_perturbed))
    d_hat = c_hat - c_hat_perturbed
    rel = (dc - d_hat) / (abs_(dc) + eps)
    return mean(rel * rel)


def sample_batch(burst, n, rng):
    """n rays: uniform frame, uniform continuous pixel position, bilinear color read"""
    if burst.frame_count == 0:
        raise ValueError("cannot sample rays from an empty burst")
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    frame = rng.integers(0, burst.frame_count, n)
    u = rng.random(n)
    v = rng.random(n)
    return {'frame': frame, 'u': u, 'v': v, 't': burst.timestamps[frame],
            'c': bilinear_read(burst.frames, frame, u, v).astype(np.float32)}


def perturb_batch(burst, batch, radius, rng):
    """Partner rays offset by radius pixels in a uniform random direction, same frames"""
    phi = rng.uniform(0.0, 2.0 * np.pi, len(batch['u']))
    u = np.clip(batch['u'] + radius * np.cos(phi) / burst.width, 0.0, 1.0)
    v = np.clip(batch['v'] + radius * np.sin(phi) / burst.height, 0.0, 1.0)
    return {'frame': batch['frame'], 'u': u, 'v': v, 't': batch['t'],
            'c': bilinear_read(burst.frames, batch['frame'], u, v).astype(np.float32)}


def learning_rate(step, config):
    """Cosine decay from lr_initial at step 0 to lr_final at the last step"""
    progress = step / max(config.steps - 1, 1)
    return config.lr_final + 0.5 * (config.lr_initial - config.lr_final) * (1.0 + math.cos(math.pi * progress))


def gradient_radius(step, config):
    progress = step / config.steps
    if progress >= config.radius_decay_fraction:
        return config.radius_end
    return config.radius_start + (config.radius_end - config.radius_start) * progress / config.radius_decay_fraction


def adam_step(params, grads, state, lr, lr_scales=None):
    """
    One bias-corrected Adam update.

    Args:
        params: name -> array
        grads: name -> array (same shapes), or RowGradient for hash tables
        state: AdamState, updated in place
        lr: base learning rate
        lr_scales: optional name prefix -> multiplier (e.g. {'pose.': 0.1})

    Returns:
        New params dict

    A RowGradient updates only the rows it touched, each row with its own step count for bias
    correction; rows no ray read keep their moments and values.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g.values if isinstance(g, RowGradient) else g)):
            raise ValueError(f"non-finite gradient in '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    updated = dict(params)
    for name, g in grads.items():
        scale = next((s for prefix, s in (lr_scales or {}).items() if name.startswith(prefix)), 1.0)
        if isinstance(g, RowGradient):
            updated[name] = _adam_rows(name, params[name], g.coalesce(), state, lr * scale)
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * scale * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updated[name] = (params[name] - step).astype(params[name].dtype)
    return updated


def _adam_rows(name, param, grad, state, lr):
    width = param.shape[-1]
    if name not in state.row_steps:
        state.m[name] = np.zeros(param.shape, dtype=param.dtype)
        state.v[name] = np.zeros(param.shape, dtype=param.dtype)
        state.row_steps[name] = np.zeros(grad.row_count, dtype=np.int64)
    m = state.m[name].reshape(-1, width)
    v = state.v[name].reshape(-1, width)
    steps = state.row_steps[name]
    rows, g = grad.rows, grad.values
    steps[rows] += 1
    m_rows = state.beta1 * m[rows] + (1.0 - state.beta1) * g
    v_rows = state.beta2 * v[rows] + (1.0 - state.beta2) * g * g
    m[rows], v[rows] = m_rows, v_rows
    c1 = 1.0 - state.beta1 ** steps[rows][:, None]
    c2 = 1.0 - state.beta2 ** steps[rows][:, None]
    updated = param.copy()
    flat = updated.reshape(-1, width)
    flat[rows] -= (lr * (m_rows / c1) / (np.sqrt(v_rows / c2) + state.eps)).astype(param.dtype)
    return updated


def _chunk_loss(scene, params, config, active, total, batch, partner):
    """Loss terms of one chunk, scaled so chunk sums add up to the batch means, plus their gradients"""
    n = len(batch['u'])
    weight = n / total
    with Tape() as tape:
        tensors = {name: Tensor(value, requires_grad=True) for name, value in params.items()}
        out = composite_rays(scene, tensors, batch['u'], batch['v'], batch['t'], active)
        lp = photometric_loss(batch['c'], out['rgb'], config.eps)
        terms = {'photometric': lp, 'alpha_reg': None, 'gradient': None}
        if partner is not None:
            out_p = composite_rays(scene, tensors, partner['u'], partner['v'], partner['t'], active)
            lp = (lp + photometric_loss(partner['c'], out_p['rgb'], config.eps)) * 0.5
            terms['photometric'] = lp
            terms['gradient'] = gradient_loss(batch['c'], partner['c'], out['rgb'], out_p['rgb'], config.eps)
        loss = lp
        if scene.obstruction is not None:
            reg = alpha_regularizer(out['alpha'], config.alpha_mode)
            if partner is not None:
                reg = (reg + alpha_regularizer(out_p['alpha'], config.alpha_mode)) * 0.5
            terms['alpha_reg'] = reg
            loss = loss + terms['alpha_reg'] * config.eta_alpha
        if terms['gradient'] is not None:
            loss = loss + terms['gradient'] * config.gradient_weight
        grads = tape.gradient(loss * weight, tensors, sparse=True)
    values = {k: (0.0 if v is None else v.item() * weight) for k, v in terms.items()}
    values['loss'] = loss.item() * weight
    return values, grads


def fit(burst, config, scene=None):
    """
    Fit a SceneModel to a burst.

    Returns:
        (scene, trace) where trace rows are {step, loss, photometric, alpha_reg, gradient}, one every 50 steps
        plus the final step
    """
    config = resolve_config(config)
    scene = scene or init_scene(burst, config)
    sample_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    params = dict(scene.params)
    state = AdamState()
    lr_scales = {'pose.': config.pose_lr_scale}
    trace = []
    started = time.time()
    print(f"[FIT] {config.preset}: {burst.frame_count} frames {burst.width}x{burst.height}, "
          f"{config.steps} steps x {config.rays_per_step} rays")

    for step in range(config.steps):
        active = {name: (coarse_mask(step, config.steps - 1, spec.encoding.levels) if config.coarse_to_fine
                         else spec.encoding.levels) for name, spec in scene.fields.items()}
        batch = sample_batch(burst, config.rays_per_step, sample_rng)
        partner = None
        if config.gradient_loss:
            partner = perturb_batch(burst, batch, gradient_radius(step, config), sample_rng)

        def run(sl):
            sub = {k: v[sl] for k, v in batch.items()}
            sub_p = None if partner is None else {k: v[sl] for k, v in partner.items()}
            return _chunk_loss(scene, params, config, active, config.rays_per_step, sub, sub_p)

        chunks = [slice(i, i + config.chunk_size) for i in range(0, config.rays_per_step, config.chunk_size)]
        results = run_chunks(run, chunks, config.deterministic)
        values = {k: tree_sum([r[0][k] for r in results]) for k in results[0][0]}
        if not math.isfinite(values['loss']):
            raise FitAborted(step, f"non-finite loss {values['loss']}")
        grads = {name: tree_sum([r[1][name] for r in results]) for name in params}
        lr = learning_rate(step, config)
        try:
            params = adam_step(params, grads, state, lr, lr_scales)
        except ValueError as e:
            raise FitAborted(step, str(e)) from None

        last = step == config.steps - 1
        if step % TRACE_EVERY == 0 or last:
            trace.append({'step': step, **values})
        if step % config.log_every == 0 or last:
            print(f"[FIT] step {step}/{config.steps} L={values['loss']:.6f} L_P={values['photometric']:.6f} "
                  f"R_alpha={values['alpha_reg']:.4f} lr={lr:.2e} levels={max(active.values())} "
                  f"({time.time() - started:.1f}s)")
        scene.params = params

    scene.pose.translation = params['pose.translation']
    scene.pose.rotation = params['pose.rotation']
    return scene, trace
