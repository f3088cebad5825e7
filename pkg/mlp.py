#!/usr/bin/env python3

"""Coordinate-network body: ReLU MLP from encoded features to control points, colors or alpha logits"""

from dataclasses import dataclass
import numpy as np

from diffcore import as_tensor, matmul, relu, reshape

DEFAULT_HIDDEN_WIDTH = 64
DEFAULT_HIDDEN_LAYERS = 4


@dataclass
class MlpWeights:
    layers: list  # [(W (in, out), b (out,)), ...] arrays or Tensors

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MLP needs at least one layer")
        for i, ((w, b), (w_next, _)) in enumerate(zip(self.layers, self.layers[1:])):
            if w.shape[1] != w_next.shape[0]:
                raise ValueError(f"layer {i} outputs {w.shape[1]} values but layer {i + 1} expects {w_next.shape[0]}")
        for i, (w, b) in enumerate(self.layers):
            if tuple(b.shape) != (w.shape[1],):
                raise ValueError(f"layer {i} bias has shape {tuple(b.shape)}, expected ({w.shape[1]},)")

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[1]


def topology(input_dim, output_dim, hidden_width=DEFAULT_HIDDEN_WIDTH, hidden_layers=DEFAULT_HIDDEN_LAYERS):
    return [input_dim] + [hidden_width] * hidden_layers + [output_dim]


def mlp_init(dims, seed, final_bias=0.0, final_scale=0.1):
    """He-uniform hidden weights, final layer scaled down, zero biases (final bias configurable)"""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"MLP topology needs at least two dims, all >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        if i == len(dims) - 2:
            w = w * final_scale
            b = b + final_bias
        layers.append((w.astype(np.float32), b.astype(np.float32)))
    return MlpWeights(layers)


def mlp_forward(features, weights):
    """Affine + ReLU on hidden layers, affine only on the last; accepts (n, in) or (in,)"""
    x = as_tensor(features)
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]))
    if x.shape[1] != weights.input_dim:
        raise ValueError(f"MLP expects {weights.input_dim} input features, got {x.shape[1]}")
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        x = matmul(x, w) + b
        if i < last:
            x = relu(x)
    return reshape(x, (weights.output_dim,)) if single else x


def parameter_count(weights):
    return sum(int(np.prod(w.shape)) + int(np.prod(b.shape)) for w, b in weights.layers)
