"""Variant assembly: shapes, parameter accounting, weight sharing, TPE rules."""

import numpy as np
import pytest

from modt import model as M
from modt.layers import count_parameters, named_tensors
from modt.model import ModelConfig, build_params, flatten_tokens, forward, unflatten_tokens
from modt.posenc import spe_sinusoidal
from modt.tensor import Tensor


def small_cfg(variant, **kw):
    base = dict(variant=variant, dim=32, heads=4, enc_layers=1, dec_layers=1,
                ffn_dim=32, num_queries=8)
    base.update(kw)
    return ModelConfig(**base)


def rand_inputs(cfg, rng):
    frame = lambda: Tensor(rng.uniform(size=(3, cfg.height, cfg.width)))
    if cfg.variant == "Baseline":
        return [frame()]
    if cfg.variant == "RgbOf":
        return [frame(), Tensor(rng.uniform(-0.1, 0.1, size=(2, cfg.height, cfg.width)))]
    return [frame(), frame()]


# ---------------------------------------------------------------- backbone


def test_backbone_output_shape():
    cfg = small_cfg("Baseline", dim=64)
    p = build_params(cfg, np.random.default_rng(0))
    fm = M.backbone_forward(p.backbone, Tensor(np.zeros((3, 64, 64))))
    assert fm.shape == (64, 8, 8)


def test_backbone_zero_input_zero_biases_gives_zero():
    cfg = small_cfg("Baseline")
    p = build_params(cfg, np.random.default_rng(0))
    fm = M.backbone_forward(p.backbone, Tensor(np.zeros((3, 64, 64))))
    assert np.array_equal(fm.numpy(), np.zeros_like(fm.numpy()))


def test_backbone_rejects_indivisible_input():
    cfg = small_cfg("Baseline")
    p = build_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        M.backbone_forward(p.backbone, Tensor(np.zeros((3, 60, 64))))


def test_backbone_gradient_reaches_first_layer():
    cfg = small_cfg("Baseline")
    p = build_params(cfg, np.random.default_rng(0))
    fm = M.backbone_forward(p.backbone, Tensor(np.random.default_rng(1).uniform(size=(3, 64, 64))))
    (fm * fm).sum().backward()
    assert np.abs(p.backbone[0].weight.grad).max() > 0


# ------------------------------------------------------------------ tokens


def test_flatten_roundtrip_and_pixel_order():
    rng = np.random.default_rng(0)
    fm_v = rng.normal(size=(2, 2, 2))
    tokens = flatten_tokens(Tensor(fm_v))
    assert tokens.shape == (4, 2)
    # token i is pixel (i // W, i % W)
    for i in range(4):
        assert np.array_equal(tokens.numpy()[i], fm_v[:, i // 2, i % 2])
    back = unflatten_tokens(tokens, 2, 2)
    assert np.array_equal(back.numpy(), fm_v)


def test_spe_row_aligns_with_token_index():
    spe = spe_sinusoidal(4, 6)
    # alignment is positional by construction: row i pairs with token i
    assert spe.shape == (4, 6)


# -------------------------------------------------------------------- fuse


def test_fuse_selecting_halves():
    cfg = small_cfg("TwoStreamRGB")
    p = build_params(cfg, np.random.default_rng(0))
    d = cfg.dim
    sel = np.zeros((d // 2, d))
    sel[:, :d // 2] = np.eye(d // 2)
    for h in (p.halve_a, p.halve_b):
        h.weight = Tensor(sel, requires_grad=True)
        h.bias = Tensor(np.zeros(d // 2), requires_grad=True)
    rng = np.random.default_rng(1)
    f1, f2 = Tensor(rng.normal(size=(5, d))), Tensor(rng.normal(size=(5, d)))
    out = M.fuse_channel_halved(f1, f2, p.halve_a, p.halve_b)
    assert np.array_equal(out.numpy(), np.hstack([f1.numpy()[:, :d // 2],
                                                  f2.numpy()[:, :d // 2]]))


def test_fuse_gradient_reaches_both_streams():
    cfg = small_cfg("TwoStreamRGB")
    p = build_params(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    f1 = Tensor(rng.normal(size=(5, cfg.dim)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(5, cfg.dim)), requires_grad=True)
    M.fuse_channel_halved(f1, f2, p.halve_a, p.halve_b).sum().backward()
    assert np.abs(f1.grad).max() > 0 and np.abs(f2.grad).max() > 0


# ----------------------------------------------------------------- forward


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_forward_output_contract(variant):
    cfg = small_cfg(variant)
    p = build_params(cfg, np.random.default_rng(0))
    out = forward(cfg, p, rand_inputs(cfg, np.random.default_rng(1)))
    assert out.class_logits.shape == (8, 3)
    assert out.boxes.shape == (8, 4)
    assert (out.boxes.numpy() > 0).all() and (out.boxes.numpy() < 1).all()
    l_mem = 2 * cfg.tokens if variant == "EarlyTPE" else cfg.tokens
    assert out.cross_attention.shape == (1, 4, 8, l_mem)
    rows = out.cross_attention.numpy().sum(axis=3)
    assert np.abs(rows - 1.0).max() < 1e-12


@pytest.mark.parametrize("variant", M.VARIANTS)
def test_forward_wrong_arity(variant):
    cfg = small_cfg(variant)
    p = build_params(cfg, np.random.default_rng(0))
    bad = [Tensor(np.zeros((3, 64, 64)))] * 3
    with pytest.raises(ValueError):
        forward(cfg, p, bad)


def test_memory_lengths_early_vs_twostream():
    for variant, factor in [("EarlyTPE", 2), ("TwoStreamRGB", 1)]:
        cfg = small_cfg(variant)
        p = build_params(cfg, np.random.default_rng(0))
        out = forward(cfg, p, rand_inputs(cfg, np.random.default_rng(1)))
        assert out.cross_attention.shape[3] == factor * cfg.tokens


def test_shared_backbone_identical_frames():
    cfg = small_cfg("TwoStreamRGB")
    p = build_params(cfg, np.random.default_rng(0))
    frame = Tensor(np.random.default_rng(1).uniform(size=(3, 64, 64)))
    f1 = flatten_tokens(M.backbone_forward(p.backbone, frame))
    f2 = flatten_tokens(M.backbone_forward(p.backbone, frame))
    assert np.array_equal(f1.numpy(), f2.numpy())


def test_late_tpe_encoders_are_unshared():
    cfg = small_cfg("LateTPE")
    p = build_params(cfg, np.random.default_rng(0))
    w1 = p.encoder[0].attn.wq.weight.numpy()
    w2 = p.encoder2[0].attn.wq.weight.numpy()
    assert not np.array_equal(w1, w2)


def test_early_tpe_zero_table_matches_disabled_tpe():
    cfg = small_cfg("EarlyTPE")
    p = build_params(cfg, np.random.default_rng(0))
    assert np.array_equal(p.tpe.table.numpy(), np.zeros_like(p.tpe.table.numpy()))
    inputs = rand_inputs(cfg, np.random.default_rng(1))
    out_zero = forward(cfg, p, inputs)

    # same parameters with TPE rows forced to distinct values changes the output
    p.tpe.table = Tensor(np.array([[0.5] * cfg.dim, [-0.5] * cfg.dim]), requires_grad=True)
    out_tpe = forward(cfg, p, inputs)
    assert not np.allclose(out_zero.class_logits.numpy(), out_tpe.class_logits.numpy())


def test_early_tpe_distinct_rows_split_identical_frames():
    cfg = small_cfg("EarlyTPE")
    p = build_params(cfg, np.random.default_rng(0))
    p.tpe.table = Tensor(np.vstack([np.full(cfg.dim, 0.7), np.full(cfg.dim, -0.7)]),
                         requires_grad=True)
    frame = Tensor(np.random.default_rng(1).uniform(size=(3, 64, 64)))
    feats = [flatten_tokens(M.backbone_forward(p.backbone, frame)) for _ in range(2)]
    from modt.posenc import apply_early_tpe
    tokens, pos = apply_early_tpe(feats, spe_sinusoidal(cfg.tokens, cfg.dim), p.tpe)
    mem = M._run_encoder(p.encoder, tokens, pos)
    l_len = cfg.tokens
    assert not np.allclose(mem.numpy()[:l_len], mem.numpy()[l_len:])


def test_decoder_has_no_tpe_parameters():
    for variant in ("EarlyTPE", "LateTPE"):
        cfg = small_cfg(variant)
        p = build_params(cfg, np.random.default_rng(0))
        decoder_names = [n for n, _ in named_tensors(p.decoder)]
        assert all("tpe" not in n.lower() for n in decoder_names)
        tpe_id = id(p.tpe.table)
        assert all(id(t) != tpe_id for _, t in named_tensors(p.decoder))


# ------------------------------------------------------------ param counts


def test_count_single_linear():
    from modt.layers import init_linear
    assert count_parameters(init_linear(4, 2, np.random.default_rng(0))) == 10


def test_baseline_vs_twostream_differ_by_halving_convs():
    rng = np.random.default_rng(0)
    base = count_parameters(build_params(small_cfg("Baseline"), rng))
    two = count_parameters(build_params(small_cfg("TwoStreamRGB"), rng))
    d = 32
    halving = 2 * (d * (d // 2) + d // 2)
    assert two - base == halving


def test_tpe_table_adds_window_times_dim():
    rng = np.random.default_rng(0)
    base = count_parameters(build_params(small_cfg("Baseline"), rng))
    early = count_parameters(build_params(small_cfg("EarlyTPE"), rng))
    assert early - base == M.WINDOW * 32


def test_late_exceeds_early_by_encoder_stack_plus_fusion():
    rng = np.random.default_rng(0)
    cfg_e = small_cfg("EarlyTPE")
    cfg_l = small_cfg("LateTPE")
    early = count_parameters(build_params(cfg_e, rng))
    late_params = build_params(cfg_l, rng)
    late = count_parameters(late_params)
    one_stack = count_parameters(late_params.encoder2)
    halving = count_parameters(late_params.halve_a) + count_parameters(late_params.halve_b)
    assert late - early == one_stack + halving


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="Nope")
    with pytest.raises(ValueError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(height=60)
