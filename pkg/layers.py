#!/usr/bin/env python3

"""Two-layer scene model: canonical image fields, neural spline flow fields, alpha matte and compositing"""

from dataclasses import asdict, dataclass
import numpy as np

from diffcore import Tensor, lerp, power, reshape, sigmoid, sum_
from encoding import EncodingParams, HashGrid, grid_init, hash_encode
from mlp import MlpWeights, mlp_forward, mlp_init
from camera import Plane, PoseModel, pixel_directions, pose_rays, project_planes, view_bounds
from spline import spline_eval_batch
from utils import run_chunks

ALPHA_BIAS = -2.0
RENDER_NAMES = ('transmission', 'obstruction', 'alpha', 'composite', 'transmission_flow', 'obstruction_flow')
CAMERA_MODES = ('canonical', 'frame')
META_VERSION = 1


@dataclass
class FieldSpec:
    encoding: EncodingParams
    dims: list  # MLP topology, first entry == encoding.output_dim

    def __post_init__(self):
        if self.dims[0] != self.encoding.output_dim:
            raise ValueError(f"field MLP input {self.dims[0]} does not match encoding output {self.encoding.output_dim}")


@dataclass
class LayerModel:
    name: str
    flow_points: int
    plane: Plane

    @property
    def image(self):
        return f"{self.name}.image"

    @property
    def flow(self):
        return f"{self.name}.flow"


@dataclass
class SceneModel:
    pose: PoseModel
    transmission: LayerModel
    obstruction: LayerModel  # None for single-layer fusion
    fields: dict  # field name -> FieldSpec
    params: dict  # parameter name -> array
    K: np.ndarray
    width: int
    height: int
    tau: float = 10.0
    spline_mode: str = 'cubic'

    def __post_init__(self):
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"temperature must be positive and finite, got {self.tau}")
        if self.obstruction is not None and self.obstruction.plane.depth == self.transmission.plane.depth:
            raise ValueError("transmission and obstruction planes must have different depths")
        self.K = np.asarray(self.K, dtype=np.float64)
        self.bounds = view_bounds(self.K)

    @property
    def layers(self):
        return [self.transmission] + ([self.obstruction] if self.obstruction is not None else [])

    def tensors(self, requires_grad=False):
        return {name: Tensor(value, requires_grad) for name, value in self.params.items()}


def field_names(two_layer=True):
    names = ['transmission.image', 'transmission.flow']
    if two_layer:
        names += ['obstruction.image', 'obstruction.flow', 'alpha']
    return names


def init_params(fields, pose, seed):
    """Fresh parameters for every field plus the pose tracks; alpha head starts biased towards transmission"""
    params = {}
    seeds = np.random.SeedSequence(seed).spawn(len(fields))
    for (name, spec), ss in zip(sorted(fields.items()), seeds):
        grid_seed, mlp_seed = ss.generate_state(2)
        params[f"{name}.grid"] = grid_init(spec.encoding, grid_seed).tables
        weights = mlp_init(spec.dims, mlp_seed, final_bias=ALPHA_BIAS if name == 'alpha' else 0.0)
        for i, (w, b) in enumerate(weights.layers):
            params[f"{name}.w{i}"] = w
            params[f"{name}.b{i}"] = b
    params['pose.translation'] = np.asarray(pose.translation, dtype=np.float32)
    params['pose.rotation'] = np.asarray(pose.rotation, dtype=np.float32)
    return params


def field_forward(scene, tensors, name, coords, active_levels=None):
    spec = scene.fields[name]
    levels = spec.encoding.levels if active_levels is None else active_levels
    grid = HashGrid(spec.encoding, tensors[f"{name}.grid"])
    weights = MlpWeights([(tensors[f"{name}.w{i}"], tensors[f"{name}.b{i}"]) for i in range(len(spec.dims) - 1)])
    return mlp_forward(hash_encode(coords, grid, levels), weights)


def canonical_coords(scene, uv):
    x0, y0, x1, y1 = scene.bounds
    return (uv - np.array([x0, y0])) * (1.0 / np.array([x1 - x0, y1 - y0]))


def camera_rays(scene, tensors, u, v, t, camera):
    if camera == 'frame':
        return pose_rays(u, v, t, scene.K, scene.pose, tensors['pose.translation'], tensors['pose.rotation'])
    if camera != 'canonical':
        raise ValueError(f"unknown camera mode '{camera}', expected one of {CAMERA_MODES}")
    d = pixel_directions(u, v, scene.K).reshape(-1, 3)
    return Tensor(np.zeros_like(d)), Tensor(d / d[:, 2:3])


def composite_rays(scene, tensors, u, v, t, active=None, alpha_override=None, camera='frame'):
    """
    Composite N rays through the two-layer model.

    Args:
        scene: SceneModel
        tensors: parameter name -> Tensor (leaves to differentiate, or plain reads)
        u, v, t: (N,) pixel coordinates in [0, 1] and times in [0, 1]
        active: optional field name -> active encoding levels
        alpha_override: optional constant alpha replacing the alpha field
        camera: 'frame' (learned pose at t) or 'canonical' (zero camera offset)

    Returns:
        dict with rgb (N,3), alpha (N,1), per-layer colors, plane coords and flows
    """
    active = active or {}
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    O, D = camera_rays(scene, tensors, u, v, t, camera)
    out = {}
    for layer in scene.layers:
        uv = canonical_coords(scene, project_planes(O, D, layer.plane))
        raw = field_forward(scene, tensors, layer.flow, uv, active.get(layer.flow))
        flow = spline_eval_batch(t, reshape(raw, (len(t), layer.flow_points, 2)), scene.spline_mode)
        warped = uv + flow
        out[f"{layer.name}_uv"] = uv
        out[f"{layer.name}_flow"] = flow
        out[f"{layer.name}_warped"] = warped
        out[layer.name] = sigmoid(field_forward(scene, tensors, layer.image, warped, active.get(layer.image)))

    if scene.obstruction is None:
        out['alpha'] = Tensor(np.zeros((len(t), 1)))
        out['rgb'] = out['transmission']
        return out
    if alpha_override is not None:
        alpha = Tensor(np.full((len(t), 1), float(alpha_override)))
    else:
        logits = field_forward(scene, tensors, 'alpha', out['obstruction_warped'], active.get('alpha'))
        alpha = sigmoid(logits * scene.tau)
    out['alpha'] = alpha
    out['rgb'] = lerp(out['transmission'], out['obstruction'], alpha)
    return out


def composite_ray(u, v, t, scene, active=None, alpha_override=None):
    """Single-ray convenience: (rgb (3,), alpha, diagnostics)"""
    out = composite_rays(scene, scene.tensors(), np.array([u]), np.array([v]), np.array([t]), active, alpha_override)
    diagnostics = {k: val.data[0] for k, val in out.items() if k not in ('rgb', 'alpha')}
    return out['rgb'].data[0], float(out['alpha'].data[0, 0]), diagnostics


def flow_magnitude_px(flow, width, height):
    scaled = flow * np.array([width, height])
    return power(sum_(scaled * scaled, axis=1), 0.5)


def render_layer(scene, which, width, height, t=0.0, alpha_override=None, camera='canonical',
                 chunk_size=65536, deterministic=False):
    """
    Rasterize one output of the scene on a width x height pixel-center grid.

    which: transmission | obstruction | alpha | composite | transmission_flow | obstruction_flow
    Returns (H, W, 3) for colors, (H, W) for alpha and flow magnitude (pixels).
    """
    if which not in RENDER_NAMES:
        raise ValueError(f"unknown layer '{which}', expected one of {RENDER_NAMES}")
    if width < 1 or height < 1:
        raise ValueError(f"resolution must be at least 1x1, got {width}x{height}")
    if scene.obstruction is None and which in ('obstruction', 'alpha', 'obstruction_flow'):
        raise ValueError(f"single-layer scene has no '{which}' output")

    ys, xs = np.mgrid[0:height, 0:width]
    u = ((xs + 0.5) / width).reshape(-1)
    v = ((ys + 0.5) / height).reshape(-1)
    tt = np.full(u.shape, float(t))
    tensors = scene.tensors()

    def render_chunk(sl):
        out = composite_rays(scene, tensors, u[sl], v[sl], tt[sl], alpha_override=alpha_override, camera=camera)
        if which == 'composite':
            return out['rgb'].data
        if which.endswith('_flow'):
            return flow_magnitude_px(out[which], scene.width, scene.height).data
        if which == 'alpha':
            return out['alpha'].data[:, 0]
        return out[which].data

    chunks = [slice(i, i + chunk_size) for i in range(0, len(u), chunk_size)]
    pixels = np.concatenate(run_chunks(render_chunk, chunks, deterministic), axis=0)
    return pixels.reshape((height, width) + pixels.shape[1:])


def scene_meta(scene):
    return {
        'version': META_VERSION,
        'width': scene.width,
        'height': scene.height,
        'intrinsics': scene.K.reshape(-1).tolist(),
        'tau': scene.tau,
        'spline_mode': scene.spline_mode,
        'eta_R': scene.pose.eta_R,
        'device_rotations': scene.pose.device_rotations.reshape(-1, 9).tolist(),
        'frame_times': scene.pose.frame_times.tolist(),
        'fields': {name: {'encoding': asdict(spec.encoding), 'dims': list(spec.dims)}
                   for name, spec in scene.fields.items()},
        'layers': {layer.name: {'flow_points': layer.flow_points, 'depth': layer.plane.depth}
                   for layer in scene.layers},
    }


def scene_from_meta(meta, params):
    """Rebuild a SceneModel from checkpoint metadata and its named parameters"""
    if meta.get('version') != META_VERSION:
        raise ValueError(f"unsupported scene metadata version {meta.get('version')}")
    for key in ('width', 'height', 'intrinsics', 'tau', 'fields', 'layers'):
        if key not in meta:
            raise ValueError(f"scene metadata missing '{key}'")
    fields = {name: FieldSpec(EncodingParams(**f['encoding']), list(f['dims'])) for name, f in meta['fields'].items()}
    missing = [f"{name}.grid" for name in fields if f"{name}.grid" not in params]
    missing += [n for n in ('pose.translation', 'pose.rotation') if n not in params]
    if missing:
        raise ValueError(f"checkpoint missing parameters {missing}")
    layers = {name: LayerModel(name, int(l['flow_points']), Plane(float(l['depth']))) for name, l in meta['layers'].items()}
    mode = meta.get('spline_mode', 'cubic')
    rotations = np.asarray(meta['device_rotations'], dtype=np.float64).reshape(-1, 3, 3)
    pose = PoseModel(params['pose.translation'], params['pose.rotation'], float(meta['eta_R']),
                     rotations, np.asarray(meta['frame_times']), mode)
    return SceneModel(pose, layers['transmission'], layers.get('obstruction'), fields, dict(params),
                      np.asarray(meta['intrinsics']).reshape(3, 3), int(meta['width']), int(meta['height']),
                      float(meta['tau']), mode)
