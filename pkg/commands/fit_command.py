#!/usr/bin/env python3
"""Fit command - fit the layered scene model to a burst bundle and export layers"""

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from data import load_bundle, select_frames, write_png
from layers import render_layer, scene_meta
from training import FitConfig, fit, resolve_config
from utils import NumpyEncoder, save_checkpoint, write_loss_csv

FIT_SPEC = {
    "toolSpec": {
        "name": "fit",
        "description": "Fit a transmission/obstruction scene model to a burst bundle; writes checkpoint, loss CSV and layer PNGs",
        "inputSchema": {
            "json": {
                "type": "object",
                "properties": {
                    "input": {"type": "string", "description": "Burst bundle directory"},
                    "preset": {"type": "string", "description": "occlusion, reflection, segmentation, shadow, dehaze or fusion"},
                    "out": {"type": "string", "description": "Output directory"},
                    "steps": {"type": "integer", "default": 6000, "description": "Optimization steps"},
                    "rays": {"type": "integer", "default": 2 ** 18, "description": "Rays per step"},
                    "seed": {"type": "integer", "default": 0, "description": "Random seed"},
                    "lr": {"type": "number", "description": "Initial learning rate (default 3e-3, decays to lr/10)"},
                    "eta_alpha": {"type": "number", "description": "Alpha regularizer weight (default from preset)"},
                    "frames": {"type": "string", "default": "all", "description": "Frame subset: all, even:N, first:N or every:K"},
                    "max_log2_table": {"type": "integer", "description": "Cap on log2 hash table size for every field"},
                    "chunk_size": {"type": "integer", "default": 2048, "description": "Rays per worker chunk"},
                    "spline_mode": {"type": "string", "default": "cubic", "description": "cubic or linear flow/pose splines"},
                    "gradient_loss": {"type": "boolean", "description": "Add the perturbed-ray gradient loss"},
                    "no_coarse_to_fine": {"type": "boolean", "description": "Keep all encoding levels active from step 0"},
                    "deterministic": {"type": "boolean", "description": "Serial chunk evaluation for bitwise-reproducible runs"}
                },
                "required": ["input", "preset", "out"]
            }
        }
    }
}


def fit_command(params):
    """Fit a scene and write config.json, model.ckpt, loss.csv and PNG layers into the output directory"""
    out = Path(params['out'])
    out.mkdir(parents=True, exist_ok=True)
    config = FitConfig(preset=params['preset'],
                       steps=params.get('steps', 6000),
                       rays_per_step=params.get('rays', 2 ** 18),
                       seed=params.get('seed', 0),
                       eta_alpha=params.get('eta_alpha'),
                       max_log2_table=params.get('max_log2_table'),
                       chunk_size=params.get('chunk_size', 2048),
                       spline_mode=params.get('spline_mode', 'cubic'),
                       gradient_loss=bool(params.get('gradient_loss')),
                       coarse_to_fine=not params.get('no_coarse_to_fine'),
                       deterministic=bool(params.get('deterministic')))
    if params.get('lr') is not None:
        config.lr_initial = params['lr']
        config.lr_final = params['lr'] * 0.1
    config = resolve_config(config)
    echo = json.dumps(asdict(config), indent=2, cls=NumpyEncoder)
    print(f"[FIT] Config: {echo}")
    (out / 'config.json').write_text(echo, encoding='utf-8')

    burst = select_frames(load_bundle(params['input']), params.get('frames', 'all'))
    scene, trace = fit(burst, config)

    save_checkpoint(out / 'model.ckpt', scene_meta(scene), scene.params)
    write_loss_csv(out / 'loss.csv', trace)
    W, H = burst.width, burst.height
    names = ['transmission', 'composite']
    if scene.obstruction is not None:
        names += ['obstruction', 'alpha']
    images = {name: render_layer(scene, name, W, H, t=0.0, camera='frame', deterministic=config.deterministic)
              for name in names}
    outputs = []
    for name, image in images.items():
        write_png(out / f"{name}.png", image, gamma=1.0 if name == 'alpha' else 2.2)
        outputs.append(f"{name}.png")
    if scene.obstruction is not None:
        write_png(out / 'obstruction_rgba.png', np.concatenate([images['obstruction'], images['alpha'][..., None]], axis=2))
        outputs.append('obstruction_rgba.png')
    print(f"[FIT] Wrote {', '.join(outputs)} to {out}")
    return {
        "out": str(out),
        "steps": config.steps,
        "final_loss": trace[-1]['loss'],
        "outputs": ['config.json', 'model.ckpt', 'loss.csv'] + outputs
    }
