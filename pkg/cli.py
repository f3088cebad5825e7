#!/usr/bin/env python3

"""Command-line entry point: fit, render, synth and eval sub-commands built from the command schemas"""

import argparse
import json
import sys
import traceback

from dotenv import load_dotenv

from commands import COMMANDS, COMMAND_SCHEMAS
from training import FitAborted
from utils import NumpyEncoder, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

ARG_TYPES = {'string': str, 'integer': int, 'number': float}


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = UsageParser(prog='nsf', description='Layered burst fitting with neural spline fields')
    sub = parser.add_subparsers(dest='command', parser_class=UsageParser)
    for schema in COMMAND_SCHEMAS:
        spec = schema['toolSpec']
        body = spec['inputSchema']['json']
        cmd = sub.add_parser(spec['name'], help=spec['description'], description=spec['description'])
        for name, prop in body['properties'].items():
            flag = '--' + name.replace('_', '-')
            if prop['type'] == 'boolean':
                cmd.add_argument(flag, dest=name, action='store_true', help=prop['description'])
            else:
                cmd.add_argument(flag, dest=name, type=ARG_TYPES[prop['type']], default=prop.get('default'),
                                 required=name in body.get('required', []), help=prop['description'])
    return parser


def run(argv=None):
    """Parse argv, dispatch to the command, print its result as one JSON line on stdout (diagnostics go to stderr); returns the exit code"""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        params = {k: v for k, v in vars(args).items() if k != 'command' and v is not None}
        print(f"[CLI] Running {args.command}", file=sys.stderr)
        result = COMMANDS[args.command](params)
    except UsageError as e:
        print(f"[CLI] Usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FitAborted as e:
        print(f"[CLI] {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"[CLI] Command failed: {type(e).__name__}: {str(e)}\n{traceback.format_exc()}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, cls=NumpyEncoder))
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(run())
