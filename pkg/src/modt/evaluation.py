"""Detection metrics: greedy matching, average precision, and the mAP report.

AP uses all-point interpolation (precision envelope made non-increasing from
the right). The headline "total" number averages AP over the IoU threshold
sweep 0.50:0.95:0.05; per-class values cover {moving, static} and the report
also carries their mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import box_iou

IOU_SWEEP = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
CLASSES = ("moving", "static")


@dataclass
class ScoredDetection:
    box: np.ndarray  # cxcywh in [0, 1]
    label: str  # "moving" | "static"
    score: float  # softmax probability of the label

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


def _det_order(dets, gts):
    """Descending score; ties by higher best-IoU against any GT, then index."""
    keys = []
    for i, d in enumerate(dets):
        best = max((box_iou(d.box, g.box) for g in gts), default=0.0)
        keys.append((-d.score, -best, i))
    return sorted(range(len(dets)), key=lambda i: keys[i])


def match_detections(dets, gts, iou_thresh):
    """Greedy TP/FP flags in score order.

    Each detection claims the highest-IoU unclaimed ground truth with
    IoU >= iou_thresh; every ground truth can be claimed once. Returns
    (ordered detections, flags) with flags[i] True for a true positive.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou threshold {iou_thresh} outside (0, 1)")
    order = _det_order(dets, gts)
    claimed = [False] * len(gts)
    flags = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if claimed[j]:
                continue
            iou = box_iou(dets[i].box, g.box)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh:
            claimed[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return [dets[i] for i in order], flags


def average_precision(flags, n_gt):
    """Area under the interpolated precision-recall curve.

    ``flags`` must already be ordered by descending score. With no ground
    truth, AP is 1 for an empty detection list (vacuously perfect) and 0
    otherwise.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # precision envelope, non-increasing from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, env):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _class_ap(dets_per_image, gts_per_image, cls, thresh):
    """Pool per-image matches of one class into a single ranked list."""
    scored = []
    n_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        d = [x for x in dets if x.label == cls]
        g = [x for x in gts if x.label == cls]
        n_gt += len(g)
        ordered, flags = match_detections(d, g, thresh)
        scored.extend(zip((x.score for x in ordered), flags))
    scored.sort(key=lambda t: -t[0])
    return average_precision([f for _, f in scored], n_gt)


def map_report(dets_per_image, gts_per_image, classes=CLASSES):
    """Full metric report as a JSON-ready dict.

    Top-level map50/map75/map_total average over classes; per_class holds the
    same three numbers for each class on its own.
    """
    per_class = {}
    for cls in classes:
        sweep = [_class_ap(dets_per_image, gts_per_image, cls, t) for t in IOU_SWEEP]
        per_class[cls] = {
            "map50": sweep[0],
            "map75": sweep[IOU_SWEEP.index(0.75)],
            "map_total": float(np.mean(sweep)),
        }
    report = {k: float(np.mean([per_class[c][k] for c in classes]))
              for k in ("map50", "map75", "map_total")}
    report["per_class"] = per_class
    return report
