"""Spatial and temporal positional encodings.

Spatial encoding (SPE) is the fixed sinusoid over the flattened pixel index,
so it is parameter-free and never serialized. Temporal encoding (TPE) is a
learned per-frame embedding row, zero-initialized so training starts
time-neutral; it is applied on the encoder side only.
"""

from __future__ import annotations

import numpy as np

from .layers import EmbeddingParams, embedding_lookup
from .tensor import Tensor, add_rowvec, concat


def spe_sinusoidal(length: int, dim: int) -> Tensor:
    """Fixed sinusoidal table over flattened token positions 0..length-1.

    table[pos, 2i]   = sin(pos / 10000^(2i/dim))
    table[pos, 2i+1] = cos(pos / 10000^(2i/dim))
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal encoding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i2 / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return Tensor(table)


def init_tpe(n_frames: int, dim: int) -> EmbeddingParams:
    """Learned frame-order embedding, zero-initialized."""
    return EmbeddingParams(Tensor(np.zeros((n_frames, dim)), requires_grad=True))


def apply_early_tpe(frame_tokens, spe: Tensor, tpe: EmbeddingParams):
    """Concatenate frames in time order into one token stream.

    Returns (tokens (N*L) x D, positions (N*L) x D) where frame t's position
    rows are SPE + TPE[t]; both streams feed a single shared encoder.
    """
    n = len(frame_tokens)
    shape = frame_tokens[0].data.shape
    for f in frame_tokens:
        if f.data.shape != shape:
            raise ValueError(f"frame shape mismatch: {f.data.shape} vs {shape}")
    if n > tpe.table.data.shape[0]:
        raise ValueError(f"{n} frames exceed the {tpe.table.data.shape[0]}-frame window")
    tokens = concat(frame_tokens, axis=0)
    pos_blocks = []
    for t in range(n):
        row = embedding_lookup(tpe, [t]).reshape(shape[1])
        pos_blocks.append(add_rowvec(spe, row))
    positions = concat(pos_blocks, axis=0)
    return tokens, positions


def apply_late_tpe(encoded_frames, tpe: EmbeddingParams):
    """Add TPE[t] to every token of already-encoded frame t, before fusion."""
    out = []
    for t, f in enumerate(encoded_frames):
        row = embedding_lookup(tpe, [t]).reshape(f.data.shape[1])
        out.append(add_rowvec(f, row))
    return out
