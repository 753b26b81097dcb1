"""Adam training loop for the set-prediction loss, plus inference helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .layers import named_tensors
from .matching import CostWeights, match_predictions, set_loss
from .tensor import Tensor


def model_inputs(variant, sample):
    """Map a SamplePair to the input list a variant expects.

    Detection is reported on the most recent frame, so the single-frame
    variants see frame t+1. Flow is fed as raw (dx, dy) in pixels divided by
    the image width.
    """
    if variant == "Baseline":
        return [sample.frame_t1]
    if variant in ("TwoStreamRGB", "EarlyTPE", "LateTPE"):
        return [sample.frame_t, sample.frame_t1]
    if variant == "RgbOf":
        w = sample.frame_t1.data.shape[2]
        return [sample.frame_t1, Tensor(sample.flow.numpy() / w)]
    raise ValueError(f"unknown variant {variant!r}")


class Adam:
    """Adam with global gradient-norm clipping over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        if self.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def loss_on_sample(cfg, params, sample, weights=None):
    """Forward + Hungarian matching + set loss for one sample.

    Intermediate decoder layers contribute auxiliary losses (each with its own
    matching); the reported parts come from the final layer only.
    """
    weights = weights or CostWeights()
    preds = M.forward(cfg, params, model_inputs(cfg.variant, sample))
    assignment = match_predictions(preds.class_logits.numpy(), preds.boxes.numpy(),
                                   sample.objects, weights)
    total, parts = set_loss(preds.class_logits, preds.boxes, sample.objects,
                            assignment, weights)
    for logits_i, boxes_i in preds.aux:
        a_i = match_predictions(logits_i.numpy(), boxes_i.numpy(),
                                sample.objects, weights)
        aux_total, _ = set_loss(logits_i, boxes_i, sample.objects, a_i, weights)
        total = total + aux_total
    return total, parts


def train(cfg, params, samples, steps, lr=1e-3, beta1=0.9, beta2=0.999,
          batch_size=16, grad_clip=1.0, seed=0, weights=None, log=None,
          rng=None, start_step=0, on_checkpoint=None, checkpoint_every=0):
    """Minimize the set loss over ``samples`` for ``steps`` Adam updates.

    Logs one ``step,total,loss_cls,loss_l1,loss_giou`` line per step through
    ``log`` when given. Returns the optimizer's rng for checkpointing.
    """
    weights = weights or CostWeights()
    tensors = [t for _, t in named_tensors(params) if t.requires_grad]
    opt = Adam(tensors, lr=lr, beta1=beta1, beta2=beta2, grad_clip=grad_clip)
    opt.t = start_step
    rng = rng or np.random.default_rng(seed)
    n = len(samples)
    for step in range(start_step + 1, start_step + steps + 1):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        opt.zero_grad()
        total_v = np.zeros(3)
        batch_total = None
        for i in idx:
            total, parts = loss_on_sample(cfg, params, samples[int(i)], weights)
            total = total * (1.0 / len(idx))
            batch_total = total if batch_total is None else batch_total + total
            total_v += [parts["loss_cls"], parts["loss_l1"], parts["loss_giou"]]
        batch_total.backward()
        opt.step()
        if log is not None:
            cls_v, l1_v, giou_v = total_v / len(idx)
            log(f"{step},{batch_total.item():.6f},{cls_v:.6f},{l1_v:.6f},{giou_v:.6f}")
        if checkpoint_every and on_checkpoint and step % checkpoint_every == 0:
            on_checkpoint(step, rng)
    return rng


def predict_detections(cfg, params, sample):
    """Run inference and keep every slot whose argmax class is a real object.

    Score is the softmax probability of the winning class; no post-processing
    beyond that.
    """
    from .evaluation import ScoredDetection

    preds = M.forward(cfg, params, model_inputs(cfg.variant, sample))
    logits = preds.class_logits.numpy()
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    boxes = preds.boxes.numpy()
    dets = []
    for j in range(logits.shape[0]):
        cls = int(np.argmax(probs[j]))
        if cls == 2:  # no-object
            continue
        label = "moving" if cls == 0 else "static"
        dets.append(ScoredDetection(boxes[j].copy(), label, float(probs[j, cls])))
    return dets, preds
