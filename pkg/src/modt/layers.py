"""Neural building blocks composed from the autodiff tensor ops.

Linear, MLP, embedding table, layer norm, 2-D convolution (1x1 / 3x3) and
post-norm transformer encoder/decoder layers. Conventions: positions are added
to queries and keys only (never values), dropout is omitted, and weights are
initialized uniform in [-s, s] with s = sqrt(1/fan_in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add_rowvec,
    bmm,
    concat,
    gather_rows,
    matmul,
    permute,
    relu,
    scale,
    softmax,
)


# ---------------------------------------------------------------- parameters


@dataclass
class LinearParams:
    weight: Tensor  # D_out x D_in
    bias: Tensor  # D_out


@dataclass
class ConvParams:
    weight: Tensor  # C_out x C_in x k x k
    bias: Tensor  # C_out


@dataclass
class LayerNormParams:
    gain: Tensor  # D
    shift: Tensor  # D


@dataclass
class EmbeddingParams:
    table: Tensor  # V x D


@dataclass
class AttentionParams:
    """Projections for multi-head attention over a model dim divisible by num_heads."""

    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    num_heads: int


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ff1: LinearParams
    ff2: LinearParams
    norm1: LayerNormParams
    norm2: LayerNormParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ff1: LinearParams
    ff2: LinearParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams


def init_linear(d_in, d_out, rng):
    s = math.sqrt(1.0 / d_in)
    w = Tensor(rng.uniform(-s, s, size=(d_out, d_in)), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return LinearParams(w, b)


def init_conv(c_in, c_out, kernel, rng):
    fan_in = c_in * kernel * kernel
    s = math.sqrt(1.0 / fan_in)
    w = Tensor(rng.uniform(-s, s, size=(c_out, c_in, kernel, kernel)), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return ConvParams(w, b)


def init_layer_norm(dim):
    return LayerNormParams(Tensor(np.ones(dim), requires_grad=True),
                           Tensor(np.zeros(dim), requires_grad=True))


def init_embedding(vocab, dim, rng, sigma=0.02):
    return EmbeddingParams(Tensor(rng.normal(0.0, sigma, size=(vocab, dim)), requires_grad=True))


def init_attention(dim, num_heads, rng):
    if dim % num_heads != 0:
        raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
    return AttentionParams(
        wq=init_linear(dim, dim, rng),
        wk=init_linear(dim, dim, rng),
        wv=init_linear(dim, dim, rng),
        wo=init_linear(dim, dim, rng),
        num_heads=num_heads,
    )


def init_encoder_layer(dim, ffn_dim, num_heads, rng):
    return EncoderLayerParams(
        attn=init_attention(dim, num_heads, rng),
        ff1=init_linear(dim, ffn_dim, rng),
        ff2=init_linear(ffn_dim, dim, rng),
        norm1=init_layer_norm(dim),
        norm2=init_layer_norm(dim),
    )


def init_decoder_layer(dim, ffn_dim, num_heads, rng):
    return DecoderLayerParams(
        self_attn=init_attention(dim, num_heads, rng),
        cross_attn=init_attention(dim, num_heads, rng),
        ff1=init_linear(dim, ffn_dim, rng),
        ff2=init_linear(ffn_dim, dim, rng),
        norm1=init_layer_norm(dim),
        norm2=init_layer_norm(dim),
        norm3=init_layer_norm(dim),
    )


# ------------------------------------------------------------------- forward


def linear(p: LinearParams, x: Tensor) -> Tensor:
    """x @ W^T + b over the last dim of an L x D_in input (one fused node)."""
    if x.data.ndim != 2 or x.data.shape[-1] != p.weight.data.shape[1]:
        raise ValueError(
            f"linear input {x.data.shape} incompatible with weight {p.weight.data.shape}")
    weight, bias = p.weight, p.bias
    data = x.data @ weight.data.T + bias.data

    def bwd(g):
        Tensor._accum(x, g @ weight.data)
        Tensor._accum(weight, g.T @ x.data)
        Tensor._accum(bias, g.sum(axis=0))

    return Tensor._from_op(data, (x, weight, bias), bwd)


def mlp(layers, x, final_activation=None):
    """Stack of linear layers with relu between them."""
    for i, p in enumerate(layers):
        x = linear(p, x)
        if i + 1 < len(layers):
            x = relu(x)
    if final_activation is not None:
        x = final_activation(x)
    return x


def layer_norm(p: LayerNormParams, x: Tensor, eps=1e-5) -> Tensor:
    """Per-row normalization over the last dim, with learned gain and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    data = xhat * p.gain.data + p.shift.data
    n = xd.shape[-1]

    def bwd(g):
        gg = g * p.gain.data
        # d/dx of (x - mu) * inv, accounting for mu and var both depending on x
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        Tensor._accum(x, gx)
        red = tuple(range(g.ndim - 1))
        Tensor._accum(p.gain, (g * xhat).sum(axis=red))
        Tensor._accum(p.shift, g.sum(axis=red))

    return Tensor._from_op(data, (x, p.gain, p.shift), bwd)


def embedding_lookup(p: EmbeddingParams, idx) -> Tensor:
    """Gather rows of the table; gradients scatter-add back per index."""
    return gather_rows(p.table, idx)


def conv2d(p: ConvParams, x: Tensor, stride=1) -> Tensor:
    """2-D cross-correlation on a C x H x W input.

    Kernel 3 uses padding 1, kernel 1 uses padding 0, so the spatial output is
    ceil(H/stride) x ceil(W/stride).
    """
    c_out, c_in, k, k2 = p.weight.data.shape
    assert k == k2
    if k not in (1, 3):
        raise ValueError(f"kernel must be 1 or 3, got {k}")
    if x.data.ndim != 3 or x.data.shape[0] != c_in:
        raise ValueError(
            f"conv2d input channels {x.data.shape} incompatible with weight {p.weight.data.shape}")
    pad = 1 if k == 3 else 0
    _, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    cols = np.empty((c_in, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    cols2 = cols.reshape(c_in * k * k, ho * wo)
    w2 = p.weight.data.reshape(c_out, c_in * k * k)
    data = (w2 @ cols2 + p.bias.data[:, None]).reshape(c_out, ho, wo)

    def bwd(g):
        g2 = g.reshape(c_out, ho * wo)
        Tensor._accum(p.weight, (g2 @ cols2.T).reshape(p.weight.data.shape))
        Tensor._accum(p.bias, g2.sum(axis=1))
        dcols = (w2.T @ g2).reshape(c_in, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += dcols[:, di, dj]
        if pad:
            dxp = dxp[:, pad:-pad, pad:-pad]
        Tensor._accum(x, dxp)

    return Tensor._from_op(data, (x, p.weight, p.bias), bwd)


def multi_head_attention(p: AttentionParams, q: Tensor, kv: Tensor,
                         q_pos=None, k_pos=None):
    """Scaled dot-product attention with positions added to Q/K inputs only.

    Returns (output Lq x D, attention weights h x Lq x Lk). Attention rows sum
    to 1; the weights are kept on the tape so visualization exports stay cheap.
    """
    dim = p.wq.weight.data.shape[1]
    if q.data.shape[1] != dim or kv.data.shape[1] != dim:
        raise ValueError(f"attention dim mismatch: q {q.shape}, kv {kv.shape}, model dim {dim}")
    h = p.num_heads
    dh = dim // h

    qin = q if q_pos is None else q + q_pos
    kin = kv if k_pos is None else kv + k_pos
    qp = linear(p.wq, qin)
    kp = linear(p.wk, kin)
    vp = linear(p.wv, kv)

    lq, lk = q.data.shape[0], kv.data.shape[0]
    inv_sqrt = 1.0 / math.sqrt(dh)
    # all heads at once: h x Lq x dh, h x dh x Lk, h x Lk x dh
    qh = permute(qp.reshape(lq, h, dh), (1, 0, 2))
    kt = permute(kp.reshape(lk, h, dh), (1, 2, 0))
    vh = permute(vp.reshape(lk, h, dh), (1, 0, 2))
    attn = softmax(scale(bmm(qh, kt), inv_sqrt), axis=2)
    heads = permute(bmm(attn, vh), (1, 0, 2)).reshape(lq, dim)
    out = linear(p.wo, heads)
    return out, attn


def encoder_layer(p: EncoderLayerParams, tokens: Tensor, pos: Tensor) -> Tensor:
    """Post-norm transformer encoder layer: self-attention then feed-forward."""
    sa, _ = multi_head_attention(p.attn, tokens, tokens, q_pos=pos, k_pos=pos)
    x = layer_norm(p.norm1, tokens + sa)
    ff = linear(p.ff2, relu(linear(p.ff1, x)))
    return layer_norm(p.norm2, x + ff)


def decoder_layer(p: DecoderLayerParams, queries: Tensor, memory: Tensor,
                  query_pos: Tensor, mem_pos: Tensor):
    """Post-norm decoder layer; returns (output, cross-attention h x Nq x L)."""
    sa, _ = multi_head_attention(p.self_attn, queries, queries,
                                 q_pos=query_pos, k_pos=query_pos)
    x = layer_norm(p.norm1, queries + sa)
    ca, cross = multi_head_attention(p.cross_attn, x, memory,
                                     q_pos=query_pos, k_pos=mem_pos)
    x = layer_norm(p.norm2, x + ca)
    ff = linear(p.ff2, relu(linear(p.ff1, x)))
    x = layer_norm(p.norm3, x + ff)
    return x, cross


# ----------------------------------------------------------- parameter walks


def named_tensors(obj, prefix=""):
    """Yield (name, Tensor) for every tensor nested in dataclasses/lists/dicts."""
    if isinstance(obj, Tensor):
        yield prefix or "param", obj
        return
    if obj is None or isinstance(obj, (int, float, str, bool)):
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from named_tensors(v, f"{prefix}.{i}" if prefix else str(i))
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from named_tensors(v, f"{prefix}.{k}" if prefix else str(k))
        return
    if hasattr(obj, "__dataclass_fields__"):
        for f in obj.__dataclass_fields__:
            yield from named_tensors(getattr(obj, f), f"{prefix}.{f}" if prefix else f)
        return


def trainable_tensors(obj):
    return [t for _, t in named_tensors(obj) if t.requires_grad]


def count_parameters(obj):
    """Total scalar count over all trainable tensors nested in ``obj``."""
    return sum(t.size for t in trainable_tensors(obj))
