#!/usr/bin/env python3

"""Shared fixtures: tiny bursts, miniature scene configs and flat parameter packing for gradient checks"""

import os
import sys

import numpy as np
import pytest

# Add repo root to path to import the flat modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from data import Burst
from diffcore import reshape
from training import FitConfig, init_scene, resolve_config

TINY_ENCODING = dict(base_resolution=2, per_level_scale=1.5, levels=2, features_per_level=2, log2_table_size=6)


def tiny_config(preset='occlusion', **overrides):
    """8x8-table, 2-wide single-hidden-layer fields with 4 flow points per layer"""
    two_layer = preset != 'fusion'
    fields = ['transmission.image', 'transmission.flow']
    layers = ['transmission']
    if two_layer:
        fields += ['obstruction.image', 'obstruction.flow', 'alpha']
        layers += ['obstruction']
    values = dict(preset=preset, steps=3, rays_per_step=64, chunk_size=32, hidden_width=2, hidden_layers=1,
                  encodings={name: dict(TINY_ENCODING) for name in fields},
                  flow_points={name: 4 for name in layers}, deterministic=True, log_every=1)
    values.update(overrides)
    return FitConfig(**values)


def flat_burst(frame_count=4, width=8, height=6, seed=0, K=None):
    rng = np.random.default_rng(seed)
    frames = rng.uniform(0.1, 0.9, (frame_count, height, width, 3))
    times = np.linspace(0.0, 1.0, frame_count) if frame_count > 1 else np.zeros(1)
    return Burst(frames, times, np.eye(3) if K is None else K)


def tiny_scene(preset='occlusion', burst=None, **overrides):
    burst = burst or flat_burst()
    return init_scene(burst, resolve_config(tiny_config(preset, **overrides)))


def randomize(scene, seed=0):
    """Replace near-zero initial parameters with O(1) values so every path carries signal"""
    rng = np.random.default_rng(seed)
    params = {}
    for name, value in sorted(scene.params.items()):
        scale = 0.02 if name == 'pose.translation' else 0.5
        params[name] = rng.normal(0.0, scale, value.shape).astype(np.float32)
    scene.params = params
    scene.pose.translation = params['pose.translation']
    scene.pose.rotation = params['pose.rotation']
    return scene


def pack(params):
    names = sorted(params)
    layout, start = [], 0
    for name in names:
        size = int(np.prod(params[name].shape))
        layout.append((name, start, start + size, params[name].shape))
        start += size
    flat = np.concatenate([np.asarray(params[n], dtype=np.float64).reshape(-1) for n in names])
    return flat, layout


def unpack(x, layout):
    return {name: reshape(x[a:b], shape) for name, a, b, shape in layout}


@pytest.fixture
def burst():
    return flat_burst()


@pytest.fixture
def scene(burst):
    return tiny_scene('occlusion', burst)
