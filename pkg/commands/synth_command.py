#!/usr/bin/env python3
"""Synth command - generate a procedural burst bundle with ground truth"""

import json
from dataclasses import asdict
from pathlib import Path

from data import save_bundle, synth_burst, synth_spec_from_dict

SYNTH_SPEC = {
    "toolSpec": {
        "name": "synth",
        "description": "Generate a synthetic two-plane burst with ground-truth layers and trajectory",
        "inputSchema": {
            "json": {
                "type": "object",
                "properties": {
                    "spec": {"type": "string", "description": "JSON file or inline JSON object of generator settings (defaults if omitted)"},
                    "out": {"type": "string", "description": "Bundle directory to write"}
                },
                "required": ["out"]
            }
        }
    }
}


def synth_command(params):
    """Render a synthetic burst and save it as a bundle"""
    raw = params.get('spec')
    values = {}
    if raw:
        text = raw if raw.lstrip().startswith('{') else Path(raw).read_text(encoding='utf-8')
        values = json.loads(text)
    spec = synth_spec_from_dict(values)
    burst = synth_burst(spec)
    save_bundle(burst, params['out'])
    return {"out": params['out'], "frames": burst.frame_count,
            "width": burst.width, "height": burst.height, "spec": asdict(spec)}
