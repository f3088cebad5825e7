#!/usr/bin/env python3

"""Utility functions for fits: worker pool, checkpoint files, loss CSV, JSON encoding"""

import csv
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import psutil

CHECKPOINT_MAGIC = b'NSFC'
CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ['step', 'L', 'L_P', 'R_alpha']


class UsageError(ValueError):
    """Bad command-line usage: unknown preset, bad flag values"""


class NumpyEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        return super().default(obj)


def worker_count():
    """NSF_THREADS if set, else physical cores"""
    env = os.getenv('NSF_THREADS')
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"NSF_THREADS must be an integer, got '{env}'") from None
    return psutil.cpu_count(logical=False) or os.cpu_count() or 1


def run_chunks(fn, chunks, deterministic=False, workers=None):
    """Apply fn to every chunk; results come back in chunk order whatever the thread timing"""
    chunks = list(chunks)
    workers = workers or worker_count()
    if deterministic or workers == 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
        return list(pool.map(fn, chunks))


def save_checkpoint(path, meta, params):
    """
    Write a single-file checkpoint.

    Layout: magic, version (u32), header length (u32), JSON header {meta, tensors: [[name, dims], ...]},
    then each tensor as float32 little-endian in header order.
    """
    names = sorted(params)
    header = json.dumps({'meta': meta, 'tensors': [[n, list(np.shape(params[n]))] for n in names]},
                        cls=NumpyEncoder).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype='<f4').tobytes())


def load_checkpoint(path, names=None):
    """Read (meta, params); with names, only those tensors are decoded"""
    with open(path, 'rb') as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack('<II', f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode('utf-8'))
        params = {}
        for name, dims in header['tensors']:
            nbytes = int(np.prod(dims)) * 4
            if names is not None and name not in names:
                f.seek(nbytes, os.SEEK_CUR)
                continue
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise ValueError(f"checkpoint truncated in tensor '{name}'")
            params[name] = np.frombuffer(raw, dtype='<f4').reshape(dims).astype(np.float32)
    if names is not None:
        missing = sorted(set(names) - set(params))
        if missing:
            raise ValueError(f"checkpoint has no tensors {missing}")
    return header['meta'], params


def write_loss_csv(path, trace):
    """Loss trace rows {step, loss, photometric, alpha_reg} as CSV with columns step,L,L_P,R_alpha"""
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_COLUMNS)
        for row in trace:
            writer.writerow([row['step'], repr(row['loss']), repr(row['photometric']), repr(row['alpha_reg'])])
