#!/usr/bin/env python3

"""Multiresolution hash encoding of 2D plane coordinates with coarse-to-fine level masking"""

import math
from dataclasses import dataclass
import numpy as np

from diffcore import Tensor, as_tensor, clip, concat, gather, reshape

MARGIN = 0.1
PRIMES = (1, 2654435761)
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class EncodingParams:
    base_resolution: int = 4
    per_level_scale: float = 1.61
    levels: int = 6
    features_per_level: int = 4
    log2_table_size: int = 12

    def __post_init__(self):
        if self.base_resolution < 1:
            raise ValueError(f"base_resolution must be >= 1, got {self.base_resolution}")
        if self.per_level_scale <= 1.0:
            raise ValueError(f"per_level_scale must be > 1, got {self.per_level_scale}")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError(f"levels and features_per_level must be >= 1, got {self.levels}, {self.features_per_level}")
        if (self.base_resolution + 1) ** 2 > self.table_size:
            raise ValueError(f"table size 2^{self.log2_table_size} cannot hold the {(self.base_resolution + 1) ** 2} level-0 vertices")

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    @property
    def output_dim(self):
        return self.levels * self.features_per_level

    def resolution(self, level):
        return int(math.floor(self.base_resolution * self.per_level_scale ** level))

    def dense(self, level):
        return (self.resolution(level) + 1) ** 2 <= self.table_size


@dataclass
class HashGrid:
    params: EncodingParams
    tables: object  # (levels, 2^T, F) array or Tensor

    def __post_init__(self):
        p = self.params
        expected = (p.levels, p.table_size, p.features_per_level)
        if tuple(self.tables.shape) != expected:
            raise ValueError(f"hash grid tables have shape {tuple(self.tables.shape)}, expected {expected}")


def grid_init(params, seed):
    rng = np.random.default_rng(seed)
    tables = rng.uniform(-INIT_RANGE, INIT_RANGE,
                         size=(params.levels, params.table_size, params.features_per_level))
    return HashGrid(params, tables.astype(np.float32))


def vertex_slots(ix, iy, level, params):
    """Table slot of integer vertex (ix, iy): direct indexing when the level fits, spatial hash otherwise"""
    res = params.resolution(level)
    if params.dense(level):
        return ix + iy * (res + 1)
    h = (ix.astype(np.uint64) * np.uint64(PRIMES[0])) ^ (iy.astype(np.uint64) * np.uint64(PRIMES[1]))
    return (h & np.uint64(params.table_size - 1)).astype(np.int64)


def hash_encode(coords, grid, active_levels):
    """
    Encode plane coordinates.

    Args:
        coords: (n, 2) or (2,) Tensor/array in [-MARGIN, 1 + MARGIN] (clamped)
        grid: HashGrid
        active_levels: number of leading levels read; the rest output zeros

    Returns:
        Tensor of shape (n, L*F), or (L*F,) for a single coordinate
    """
    p = grid.params
    if not 0 <= active_levels <= p.levels:
        raise ValueError(f"active_levels must be in [0, {p.levels}], got {active_levels}")
    coords = as_tensor(coords)
    single = coords.ndim == 1
    if single:
        coords = reshape(coords, (1, 2))
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
    n, F = coords.shape[0], p.features_per_level

    parts = []
    if active_levels > 0:
        unit = (clip(coords, -MARGIN, 1.0 + MARGIN) + MARGIN) * (1.0 / (1.0 + 2.0 * MARGIN))
        res = np.array([p.resolution(l) for l in range(active_levels)], dtype=np.float64)
        pos_x = unit[:, 0:1] * res
        pos_y = unit[:, 1:2] * res
        ix = np.clip(np.floor(pos_x.data), 0, res - 1).astype(np.int64)
        iy = np.clip(np.floor(pos_y.data), 0, res - 1).astype(np.int64)
        fx = pos_x - ix
        fy = pos_y - iy

        slots = np.empty((n, active_levels, 4), dtype=np.int64)
        for l in range(active_levels):
            corners = [(ix[:, l], iy[:, l]), (ix[:, l] + 1, iy[:, l]),
                       (ix[:, l], iy[:, l] + 1), (ix[:, l] + 1, iy[:, l] + 1)]
            for c, (cx, cy) in enumerate(corners):
                slots[:, l, c] = l * p.table_size + vertex_slots(cx, cy, l, p)

        corner_features = gather(as_tensor(grid.tables), slots)  # (n, La, 4, F)
        gx, gy = 1.0 - fx, 1.0 - fy
        weights = concat([reshape(w, (n, active_levels, 1)) for w in (gx * gy, fx * gy, gx * fy, fx * fy)], axis=2)
        mixed = (corner_features * reshape(weights, (n, active_levels, 4, 1))).sum(axis=2)
        parts.append(reshape(mixed, (n, active_levels * F)))
    if active_levels < p.levels:
        parts.append(Tensor(np.zeros((n, (p.levels - active_levels) * F))))

    features = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return reshape(features, (p.output_dim,)) if single else features


def coarse_mask(epoch, max_epoch, levels):
    """Number of active levels at epoch: levels i with i/levels below 0.4 + 0.6*sin(pi/2 * epoch/max_epoch)"""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if max_epoch <= 0 or epoch >= max_epoch:
        return levels
    threshold = 0.4 + 0.6 * math.sin(0.5 * math.pi * max(epoch, 0) / max_epoch)
    return sum(1 for i in range(levels) if i / levels < threshold)
