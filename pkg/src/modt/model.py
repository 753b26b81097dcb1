"""Two-stream detection transformer variants with set-prediction heads.

Five variants share one pipeline skeleton: small conv backbone (stride-8) ->
flatten to tokens -> transformer encoder(s) with spatial positions -> optional
temporal encoding and stream fusion -> decoder over learned object queries ->
class head ({moving, static, no-object}) and sigmoid box head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .posenc import apply_early_tpe, apply_late_tpe, init_tpe, spe_sinusoidal
from .tensor import Tensor, concat, relu, sigmoid

VARIANTS = ("Baseline", "TwoStreamRGB", "EarlyTPE", "LateTPE", "RgbOf")
NUM_CLASSES = 3  # moving, static, no-object
WINDOW = 2  # two-frame temporal window


@dataclass
class ModelConfig:
    variant: str = "Baseline"
    height: int = 64
    width: int = 64
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    num_queries: int = 10
    backbone_channels: tuple = (32, 64)
    early_tpe_uses_encoder: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dim % 2 != 0:
            raise ValueError(f"model dim must be even, got {self.dim}")
        if self.dim % self.heads != 0:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.height % 8 != 0 or self.width % 8 != 0:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by 8")

    @property
    def feat_h(self):
        return self.height // 8

    @property
    def feat_w(self):
        return self.width // 8

    @property
    def tokens(self):
        return self.feat_h * self.feat_w


@dataclass
class PredictionSet:
    """Fixed-size set of query outputs plus retained cross-attention maps."""

    class_logits: Tensor  # N_q x 3
    boxes: Tensor  # N_q x 4, cxcywh, each coordinate in (0, 1)
    cross_attention: Tensor  # n_dec x h x N_q x L_mem
    # head outputs of the intermediate decoder layers, deepest last; training
    # supervises these too, which speeds up set-prediction convergence a lot
    aux: list = field(default_factory=list)  # [(class_logits, boxes), ...]


@dataclass
class ModelParams:
    backbone: list  # conv stack for the RGB stream
    encoder: list  # encoder layer stack (shared or stream 0)
    decoder: list
    query_embed: Tensor  # N_q x D learned query positions
    class_head: L.LinearParams
    box_mlp: list  # three LinearParams
    backbone2: list | None = None  # flow-stream backbone (RgbOf)
    encoder2: list | None = None  # dedicated second encoder (LateTPE, RgbOf)
    tpe: L.EmbeddingParams | None = None
    halve_a: L.LinearParams | None = None  # 1x1 channel-halving conv, stream 0
    halve_b: L.LinearParams | None = None


def _build_backbone(c_in, cfg, rng):
    chans = [c_in, *cfg.backbone_channels, cfg.dim]
    return [L.init_conv(chans[i], chans[i + 1], 3, rng) for i in range(3)]


def _build_encoder(cfg, rng):
    return [L.init_encoder_layer(cfg.dim, cfg.ffn_dim, cfg.heads, rng) for _ in range(cfg.enc_layers)]


NO_OBJECT_PRIOR_LOGIT = 2.0


def _init_class_head(d, rng):
    """Class head starts biased toward no-object so the untrained model does
    not flood every query slot with duplicate detections."""
    head = L.init_linear(d, NUM_CLASSES, rng)
    bias = head.bias.numpy()
    bias[NUM_CLASSES - 1] = NO_OBJECT_PRIOR_LOGIT
    head.bias = Tensor(bias, requires_grad=True)
    return head


def build_params(cfg: ModelConfig, rng) -> ModelParams:
    """Initialize all trainable tensors for a variant, deterministically per rng."""
    d = cfg.dim
    p = ModelParams(
        backbone=_build_backbone(3, cfg, rng),
        encoder=_build_encoder(cfg, rng),
        decoder=[L.init_decoder_layer(d, cfg.ffn_dim, cfg.heads, rng)
                 for _ in range(cfg.dec_layers)],
        query_embed=Tensor(rng.normal(0.0, 0.02, size=(cfg.num_queries, d)), requires_grad=True),
        class_head=_init_class_head(d, rng),
        box_mlp=[L.init_linear(d, d, rng), L.init_linear(d, d, rng), L.init_linear(d, 4, rng)],
    )
    if cfg.variant in ("TwoStreamRGB", "LateTPE", "RgbOf"):
        p.halve_a = L.init_linear(d, d // 2, rng)
        p.halve_b = L.init_linear(d, d // 2, rng)
    if cfg.variant in ("EarlyTPE", "LateTPE"):
        p.tpe = init_tpe(WINDOW, d)
    if cfg.variant == "LateTPE":
        p.encoder2 = _build_encoder(cfg, rng)
    if cfg.variant == "RgbOf":
        p.backbone2 = _build_backbone(2, cfg, rng)
        p.encoder2 = _build_encoder(cfg, rng)
    return p


def backbone_forward(blocks, image: Tensor) -> Tensor:
    """Three stride-2 3x3 conv+relu blocks; C x H x W -> D x H/8 x W/8."""
    c, h, w = image.data.shape
    if h % 8 != 0 or w % 8 != 0:
        raise ValueError(f"backbone input {h}x{w} must be divisible by 8")
    x = image
    for blk in blocks:
        x = relu(L.conv2d(blk, x, stride=2))
    return x


def flatten_tokens(fm: Tensor) -> Tensor:
    """D x H' x W' feature map -> (H'*W') x D tokens in row-major pixel order."""
    d, h, w = fm.data.shape
    return fm.reshape(d, h * w).transpose()


def unflatten_tokens(tokens: Tensor, h, w) -> Tensor:
    return tokens.transpose().reshape(tokens.data.shape[1], h, w)


def fuse_channel_halved(f1: Tensor, f2: Tensor, halve_a, halve_b) -> Tensor:
    """Per-stream 1x1 conv D -> D/2, then channel concatenation back to D."""
    if f1.data.shape != f2.data.shape:
        raise ValueError(f"stream shape mismatch: {f1.data.shape} vs {f2.data.shape}")
    if f1.data.shape[1] % 2 != 0:
        raise ValueError(f"channel dim must be even to halve, got {f1.data.shape[1]}")
    return concat([L.linear(halve_a, f1), L.linear(halve_b, f2)], axis=1)


def _run_encoder(stack, tokens, pos):
    for lay in stack:
        tokens = L.encoder_layer(lay, tokens, pos)
    return tokens


def _expected_arity(variant):
    return {"Baseline": 1, "TwoStreamRGB": 2, "EarlyTPE": 2, "LateTPE": 2, "RgbOf": 2}[variant]


def forward(cfg: ModelConfig, params: ModelParams, inputs) -> PredictionSet:
    """Run one sample through the configured variant.

    ``inputs`` is a list of Tensors: one 3 x H x W frame for Baseline; frames
    (t, t+1) for the temporal variants; (RGB frame, 2 x H x W flow) for RgbOf.
    """
    if len(inputs) != _expected_arity(cfg.variant):
        raise ValueError(
            f"{cfg.variant} expects {_expected_arity(cfg.variant)} inputs, got {len(inputs)}")
    spe = spe_sinusoidal(cfg.tokens, cfg.dim)
    v = cfg.variant

    if v == "Baseline":
        tokens = flatten_tokens(backbone_forward(params.backbone, inputs[0]))
        memory = _run_encoder(params.encoder, tokens, spe)
        mem_pos = spe
    elif v == "TwoStreamRGB":
        enc = [_run_encoder(params.encoder, flatten_tokens(backbone_forward(params.backbone, f)), spe)
               for f in inputs]
        memory = fuse_channel_halved(enc[0], enc[1], params.halve_a, params.halve_b)
        mem_pos = spe
    elif v == "EarlyTPE":
        feats = [flatten_tokens(backbone_forward(params.backbone, f)) for f in inputs]
        tokens, pos = apply_early_tpe(feats, spe, params.tpe)
        memory = _run_encoder(params.encoder, tokens, pos) if cfg.early_tpe_uses_encoder else tokens
        mem_pos = concat([spe, spe], axis=0)  # decoder side carries no TPE
    elif v == "LateTPE":
        feats = [flatten_tokens(backbone_forward(params.backbone, f)) for f in inputs]
        e0 = _run_encoder(params.encoder, feats[0], spe)
        e1 = _run_encoder(params.encoder2, feats[1], spe)
        d0, d1 = apply_late_tpe([e0, e1], params.tpe)
        memory = fuse_channel_halved(d0, d1, params.halve_a, params.halve_b)
        mem_pos = spe
    else:  # RgbOf
        rgb, flow = inputs
        if flow.data.shape[0] != 2:
            raise ValueError(f"flow input must have 2 channels, got {flow.data.shape[0]}")
        e_rgb = _run_encoder(params.encoder,
                             flatten_tokens(backbone_forward(params.backbone, rgb)), spe)
        e_flow = _run_encoder(params.encoder2,
                              flatten_tokens(backbone_forward(params.backbone2, flow)), spe)
        memory = fuse_channel_halved(e_rgb, e_flow, params.halve_a, params.halve_b)
        mem_pos = spe

    x = Tensor(np.zeros((cfg.num_queries, cfg.dim)))
    cross = []
    aux = []
    for lay in params.decoder[:-1]:
        x, ca = L.decoder_layer(lay, x, memory, params.query_embed, mem_pos)
        cross.append(ca.reshape(1, cfg.heads, cfg.num_queries, memory.data.shape[0]))
        aux.append((L.linear(params.class_head, x),
                    L.mlp(params.box_mlp, x, final_activation=sigmoid)))
    x, ca = L.decoder_layer(params.decoder[-1], x, memory, params.query_embed, mem_pos)
    cross.append(ca.reshape(1, cfg.heads, cfg.num_queries, memory.data.shape[0]))
    class_logits = L.linear(params.class_head, x)
    boxes = L.mlp(params.box_mlp, x, final_activation=sigmoid)
    return PredictionSet(class_logits, boxes, concat(cross, axis=0), aux)


def count_parameters(params) -> int:
    return L.count_parameters(params)
