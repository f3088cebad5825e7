#!/usr/bin/env python3

"""Per-application fit presets: encoding sizes, flow control points, plane depths and alpha loss settings"""

from encoding import EncodingParams
from utils import UsageError

ENCODING_SIZES = {
    'T': EncodingParams(base_resolution=4, per_level_scale=1.61, levels=6, features_per_level=4, log2_table_size=12),
    'S': EncodingParams(base_resolution=4, per_level_scale=1.61, levels=8, features_per_level=4, log2_table_size=14),
    'M': EncodingParams(base_resolution=4, per_level_scale=1.61, levels=12, features_per_level=4, log2_table_size=16),
    'L': EncodingParams(base_resolution=4, per_level_scale=1.61, levels=16, features_per_level=4, log2_table_size=18),
}

# encodings keyed by field name; a preset without 'obstruction' fits a single transmission layer
PRESETS = {
    'occlusion': {
        'encodings': {'transmission.flow': 'T', 'transmission.image': 'L',
                      'obstruction.flow': 'T', 'obstruction.image': 'M', 'alpha': 'M'},
        'flow_points': {'transmission': 11, 'obstruction': 11},
        'depths': {'transmission': 1.0, 'obstruction': 0.5},
        'eta_alpha': 0.02, 'alpha_mode': 'magnitude', 'tau': 10.0,
    },
    'reflection': {
        'encodings': {'transmission.flow': 'T', 'transmission.image': 'L',
                      'obstruction.flow': 'T', 'obstruction.image': 'T', 'alpha': 'L'},
        'flow_points': {'transmission': 11, 'obstruction': 11},
        'depths': {'transmission': 1.0, 'obstruction': 2.5},
        'eta_alpha': 0.0, 'alpha_mode': 'magnitude', 'tau': 1.0,
    },
    'segmentation': {
        'encodings': {'transmission.flow': 'S', 'transmission.image': 'L',
                      'obstruction.flow': 'S', 'obstruction.image': 'L', 'alpha': 'M'},
        'flow_points': {'transmission': 15, 'obstruction': 15},
        'depths': {'transmission': 1.0, 'obstruction': 2.0},
        'eta_alpha': 0.005, 'alpha_mode': 'segmentation', 'tau': 10.0,
    },
    'shadow': {
        'encodings': {'transmission.flow': 'T', 'transmission.image': 'L',
                      'obstruction.flow': 'T', 'obstruction.image': 'T', 'alpha': 'M'},
        'flow_points': {'transmission': 11, 'obstruction': 11},
        'depths': {'transmission': 1.0, 'obstruction': 2.0},
        'eta_alpha': 0.0, 'alpha_mode': 'magnitude', 'tau': 1.0,
    },
    'dehaze': {
        'encodings': {'transmission.flow': 'T', 'transmission.image': 'L',
                      'obstruction.flow': 'T', 'obstruction.image': 'T', 'alpha': 'S'},
        'flow_points': {'transmission': 11, 'obstruction': 11},
        'depths': {'transmission': 1.0, 'obstruction': 0.5},
        'eta_alpha': -0.01, 'alpha_mode': 'magnitude', 'tau': 1.0,
    },
    'fusion': {
        'encodings': {'transmission.flow': 'S', 'transmission.image': 'L'},
        'flow_points': {'transmission': 31},
        'depths': {'transmission': 1.0},
        'eta_alpha': 0.0, 'alpha_mode': 'magnitude', 'tau': 1.0,
    },
}


def get_preset(name):
    if name not in PRESETS:
        raise UsageError(f"unknown preset '{name}', valid presets: {', '.join(sorted(PRESETS))}")
    return PRESETS[name]


def encoding_for(size):
    if size not in ENCODING_SIZES:
        raise UsageError(f"unknown encoding size '{size}', expected one of {', '.join(ENCODING_SIZES)}")
    return ENCODING_SIZES[size]
