"""Self-describing checkpoint file: magic, JSON header, float64 payloads.

Layout: 7-byte magic ``MODETR1``, little-endian u32 header length, UTF-8 JSON
header (config echo, parameter names/shapes/offsets, training step, rng
state), then the concatenated little-endian float64 tensors. Loading restores
forward outputs bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .layers import named_tensors
from .model import ModelConfig, build_params

MAGIC = b"MODETR1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, cfg: ModelConfig, params, step=0, run_config=None, rng_state=None):
    entries = []
    payload = bytearray()
    for name, t in named_tensors(params):
        if not t.requires_grad:
            continue
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    header = {
        "format_version": 1,
        "model_config": asdict(cfg),
        "run_config": run_config,
        "step": step,
        "rng_state": rng_state,
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (cfg, params, header dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:7]!r}")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in header["model_config"].items()})
    params = build_params(cfg, np.random.default_rng(0))
    by_name = {name: t for name, t in named_tensors(params) if t.requires_grad}
    base = start + hlen
    for e in header["tensors"]:
        if e["name"] not in by_name:
            raise CheckpointError(f"{path}: unknown tensor {e['name']!r}")
        t = by_name.pop(e["name"])
        shape = tuple(e["shape"])
        if shape != t.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {e['name']}: {shape} vs {t.data.shape}")
        off = base + e["offset"]
        arr = np.frombuffer(blob, dtype="<f8", offset=off,
                            count=int(np.prod(shape)) if shape else 1)
        t.data = arr.reshape(shape).astype(np.float64)
    if by_name:
        raise CheckpointError(f"{path}: missing tensors {sorted(by_name)}")
    return cfg, params, header
