#!/usr/bin/env python3
"""Render command - rasterize one layer of a fitted scene from its checkpoint"""

from data import write_png
from layers import render_layer, scene_from_meta
from utils import load_checkpoint

RENDER_SPEC = {
    "toolSpec": {
        "name": "render",
        "description": "Render a layer (transmission, obstruction, alpha, composite, transmission_flow, obstruction_flow) from a checkpoint",
        "inputSchema": {
            "json": {
                "type": "object",
                "properties": {
                    "model": {"type": "string", "description": "Checkpoint file written by fit"},
                    "layer": {"type": "string", "description": "Layer name"},
                    "time": {"type": "number", "default": 0.0, "description": "Normalized burst time in [0, 1]"},
                    "out": {"type": "string", "description": "Output PNG path"},
                    "width": {"type": "integer", "description": "Output width (default: fitted width)"},
                    "height": {"type": "integer", "description": "Output height (default: fitted height)"},
                    "camera": {"type": "string", "default": "frame", "description": "frame (learned pose at time) or canonical"},
                    "alpha_override": {"type": "number", "description": "Constant alpha for the composite (0 removes the obstruction)"}
                },
                "required": ["model", "layer", "out"]
            }
        }
    }
}


def render_command(params):
    """Render one layer to a 16-bit PNG"""
    meta, tensors = load_checkpoint(params['model'])
    scene = scene_from_meta(meta, tensors)
    W = params.get('width') or scene.width
    H = params.get('height') or scene.height
    layer = params['layer']
    image = render_layer(scene, layer, W, H, t=params.get('time', 0.0),
                         alpha_override=params.get('alpha_override'), camera=params.get('camera', 'frame'))
    gamma = 2.2 if image.ndim == 3 else 1.0
    write_png(params['out'], image, gamma=gamma)
    print(f"[RENDER] {layer} {W}x{H} at t={params.get('time', 0.0)} -> {params['out']}")
    return {"out": params['out'], "layer": layer, "width": W, "height": H,
            "mean": float(image.mean())}
