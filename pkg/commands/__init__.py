#!/usr/bin/env python3

"""Command registry - imports all commands and builds COMMANDS dict and COMMAND_SCHEMAS list"""

from .fit_command import fit_command, FIT_SPEC
from .render_command import render_command, RENDER_SPEC
from .synth_command import synth_command, SYNTH_SPEC
from .eval_command import eval_command, EVAL_SPEC

COMMANDS = {
    'fit': fit_command,
    'render': render_command,
    'synth': synth_command,
    'eval': eval_command
}

COMMAND_SCHEMAS = [
    FIT_SPEC,
    RENDER_SPEC,
    SYNTH_SPEC,
    EVAL_SPEC
]
