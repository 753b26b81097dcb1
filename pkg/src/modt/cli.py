"""Command-line surface: generate, train, eval, export-attention.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error. Config files are
JSON; unknown keys are rejected so experiment-sweep typos fail loudly. Every
command validates its inputs before writing, and all outputs go through a
temp-file-then-rename so partial results never look complete.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import model as M
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DatasetFormatError, GenerationError, SceneSpec,
                   generate_sample, read_dataset, write_dataset)
from .evaluation import map_report
from .images import normalize_to_gray, write_pgm, write_ppm
from .matching import CostWeights
from .training import model_inputs, predict_detections, train


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Model + optimizer + bookkeeping settings for one training run."""

    variant: str = "Baseline"
    height: int = 64
    width: int = 64
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    num_queries: int = 10
    early_tpe_uses_encoder: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 300
    batch_size: int = 16
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0
    cost_class: float = 1.0
    cost_l1: float = 5.0
    cost_giou: float = 2.0
    noobj_weight: float = 0.1

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    def model_config(self):
        return M.ModelConfig(
            variant=self.variant, height=self.height, width=self.width,
            dim=self.dim, heads=self.heads, enc_layers=self.enc_layers,
            dec_layers=self.dec_layers, ffn_dim=self.ffn_dim,
            num_queries=self.num_queries,
            early_tpe_uses_encoder=self.early_tpe_uses_encoder)

    def cost_weights(self):
        return CostWeights(self.cost_class, self.cost_l1, self.cost_giou,
                           self.noobj_weight)


def _load_json(path, what):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e


def _scene_spec(d):
    known = {f.name for f in dataclasses.fields(SceneSpec)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown scene spec field(s): {', '.join(unknown)}")
    try:
        return SceneSpec(**d)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _atomic_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    spec = _scene_spec(_load_json(args.spec, "scene spec") if args.spec else {})
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    samples = [generate_sample(spec, i) for i in range(args.count)]
    write_dataset(args.out, samples, spec)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _check_compat(variant, samples):
    if variant == "RgbOf" and any(s.flow is None for s in samples):
        raise ConfigError(f"variant RgbOf needs optical flow, but the dataset has none")


def cmd_train(args):
    if args.resume:
        cfg_m, params, header = load_checkpoint(args.resume)
        run = RunConfig.from_dict(header.get("run_config") or {})
        start_step = header.get("step", 0)
        rng = np.random.default_rng(run.seed)
        if header.get("rng_state"):
            rng.bit_generator.state = header["rng_state"]
    else:
        if not args.config:
            raise ConfigError("--config is required unless --resume is given")
        run = RunConfig.from_dict(_load_json(args.config, "run config"))
        cfg_m = run.model_config()
        params = M.build_params(cfg_m, np.random.default_rng(run.seed))
        start_step = 0
        rng = np.random.default_rng(run.seed)

    samples, _ = read_dataset(args.data)
    if not samples:
        raise ConfigError(f"dataset {args.data} is empty")
    _check_compat(cfg_m.variant, samples)

    steps = run.steps if args.steps is None else args.steps
    run_echo = dataclasses.asdict(run)

    def checkpoint(step, cur_rng):
        save_checkpoint(args.out, cfg_m, params, step=step, run_config=run_echo,
                        rng_state=cur_rng.bit_generator.state)

    rng = train(cfg_m, params, samples, steps, lr=run.lr, beta1=run.beta1,
                beta2=run.beta2, batch_size=run.batch_size,
                grad_clip=run.grad_clip, weights=run.cost_weights(),
                log=print, rng=rng, start_step=start_step,
                on_checkpoint=checkpoint, checkpoint_every=run.checkpoint_every)
    checkpoint(start_step + steps, rng)
    return 0


def run_eval(ckpt_path, data_dir, out_path, detections_fn=None):
    """Evaluate a checkpoint over a dataset and write the metric report JSON.

    ``detections_fn(cfg, params, sample) -> list[ScoredDetection]`` can be
    injected (tests use an oracle); default is the model's own predictions.
    """
    cfg, params, _ = load_checkpoint(ckpt_path)
    samples, _ = read_dataset(data_dir)
    _check_compat(cfg.variant, samples)
    if detections_fn is None:
        detections_fn = lambda c, p, s: predict_detections(c, p, s)[0]
    dets = [detections_fn(cfg, params, s) for s in samples]
    gts = [s.objects for s in samples]
    report = map_report(dets, gts)
    _atomic_json(out_path, report)
    return report


def cmd_eval(args):
    report = run_eval(args.ckpt, args.data, args.out)
    print(json.dumps({k: report[k] for k in ("map_total", "map50", "map75")}))
    return 0


def export_attention(cfg, params, sample, out_dir):
    """Write per-layer, per-query cross-attention heatmaps and input frames.

    Heads are averaged, maps reshaped to the feature grid (one map per memory
    block; the concatenated-token variant splits into _t0/_t1), min-max
    normalized to PGM gray. Returns the list of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    inputs = model_inputs(cfg.variant, sample)
    preds = M.forward(cfg, params, inputs)
    cross = preds.cross_attention.numpy()  # n_dec x h x N_q x L_mem
    n_dec, _, n_q, l_mem = cross.shape
    grid = (cfg.feat_h, cfg.feat_w)
    written = []
    for layer in range(n_dec):
        maps = cross[layer].mean(axis=0)  # N_q x L_mem
        for q in range(n_q):
            if l_mem == 2 * cfg.tokens:  # temporal-concat memory: one map per frame
                for t in range(2):
                    block = maps[q, t * cfg.tokens:(t + 1) * cfg.tokens].reshape(grid)
                    name = f"attn_layer{layer}_query{q}_t{t}.pgm"
                    write_pgm(os.path.join(out_dir, name), normalize_to_gray(block))
                    written.append(name)
            else:
                block = maps[q].reshape(grid)
                name = f"attn_layer{layer}_query{q}.pgm"
                write_pgm(os.path.join(out_dir, name), normalize_to_gray(block))
                written.append(name)
    for i, inp in enumerate(inputs):
        if inp.data.shape[0] != 3:
            continue  # flow stream has no RGB rendering
        name = f"input_{i}.ppm"
        write_ppm(os.path.join(out_dir, name), inp.numpy())
        written.append(name)
    return written


def cmd_export_attention(args):
    cfg, params, _ = load_checkpoint(args.ckpt)
    samples, _ = read_dataset(args.data)
    if not 0 <= args.sample < len(samples):
        raise ConfigError(f"sample index {args.sample} out of range [0, {len(samples)})")
    _check_compat(cfg.variant, samples)
    written = export_attention(cfg, params, samples[args.sample], args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


# -------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="modt",
                                description="moving-object detection transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic two-frame dataset")
    g.add_argument("--spec", help="scene spec JSON (defaults used if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a variant on a dataset")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, default=None,
                   help="override the number of steps for this invocation")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="compute the mAP report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="metric report JSON path")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-attention", help="dump decoder attention heatmaps")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_attention)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, GenerationError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
