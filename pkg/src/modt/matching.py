"""Hungarian set matching and the detection training loss.

Boxes are (cx, cy, w, h) normalized to [0, 1]. The matcher works on plain
floats and stays off the autodiff tape (the assignment is piecewise-constant);
only the loss itself is differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLASS_MOVING = 0
CLASS_STATIC = 1
CLASS_NO_OBJECT = 2
LABELS = {"moving": CLASS_MOVING, "static": CLASS_STATIC}


@dataclass
class GroundTruthObject:
    box: np.ndarray  # (cx, cy, w, h) in [0, 1]
    label: str  # "moving" | "static"

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")


@dataclass
class CostWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    noobj: float = 0.1


def cxcywh_to_xyxy(box):
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def box_iou(a, b) -> float:
    """Intersection over union of two cxcywh boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"boxes need positive width/height: {a}, {b}")
    ax1, ay1, ax2, ay2 = cxcywh_to_xyxy(a)
    bx1, by1, bx2, by2 = cxcywh_to_xyxy(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def generalized_iou(a, b) -> float:
    """IoU minus the empty fraction of the tightest enclosing box; in (-1, 1]."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"boxes need positive width/height: {a}, {b}")
    ax1, ay1, ax2, ay2 = cxcywh_to_xyxy(a)
    bx1, by1, bx2, by2 = cxcywh_to_xyxy(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c_area = cw * ch
    return inter / union - (c_area - union) / c_area


def generalized_iou_t(pred: Tensor, gt) -> Tensor:
    """Differentiable GIoU of a predicted cxcywh box (Tensor[4]) vs a fixed box."""
    gt = np.asarray(gt, dtype=np.float64)
    zero = Tensor(0.0)
    px1 = pred[0:1] - pred[2:3] * 0.5
    py1 = pred[1:2] - pred[3:4] * 0.5
    px2 = pred[0:1] + pred[2:3] * 0.5
    py2 = pred[1:2] + pred[3:4] * 0.5
    gx1, gy1, gx2, gy2 = (Tensor([v]) for v in cxcywh_to_xyxy(gt))

    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), zero)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), zero)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = float((gx2.data[0] - gx1.data[0]) * (gy2.data[0] - gy1.data[0]))
    union = area_p + area_g - inter
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c_area = cw * ch
    giou = inter / union - (c_area - union) / c_area
    return giou.reshape(())


def matched_box_terms(boxes: Tensor, query_idx, gt_boxes) -> Tensor:
    """Fused box-regression terms over matched pairs.

    ``boxes`` is the N_q x 4 cxcywh prediction, ``query_idx`` the matched query
    slot per pair, ``gt_boxes`` the k x 4 targets. Returns a length-2 Tensor
    [sum of L1 distances, sum of (1 - GIoU)] with a hand-written backward (the
    tensor-op composition would cost ~30 tape nodes per pair).
    """
    qi = np.asarray(query_idx, dtype=np.int64)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    p = boxes.data[qi]

    l1_sign = np.sign(p - g)
    l1 = np.abs(p - g).sum()

    px1, px2 = p[:, 0] - p[:, 2] / 2, p[:, 0] + p[:, 2] / 2
    py1, py2 = p[:, 1] - p[:, 3] / 2, p[:, 1] + p[:, 3] / 2
    gx1, gx2 = g[:, 0] - g[:, 2] / 2, g[:, 0] + g[:, 2] / 2
    gy1, gy2 = g[:, 1] - g[:, 3] / 2, g[:, 1] + g[:, 3] / 2

    iw = np.maximum(np.minimum(px2, gx2) - np.maximum(px1, gx1), 0.0)
    ih = np.maximum(np.minimum(py2, gy2) - np.maximum(py1, gy1), 0.0)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    c_area = cw * ch
    giou_sum = (inter / union - (c_area - union) / c_area).sum()
    data = np.array([l1, len(qi) - giou_sum])

    def bwd(grad):
        g_l1, g_giou = grad[0], grad[1]
        # intersection corner derivatives (zero where the other box's corner
        # is the active one, or where there is no overlap)
        live = inter > 0
        di_x1 = -ih * (px1 > gx1) * live
        di_x2 = ih * (px2 < gx2) * live
        di_y1 = -iw * (py1 > gy1) * live
        di_y2 = iw * (py2 < gy2) * live
        # predicted-area and union derivatives
        da_x1, da_x2 = -(py2 - py1), (py2 - py1)
        da_y1, da_y2 = -(px2 - px1), (px2 - px1)
        du_x1, du_x2 = da_x1 - di_x1, da_x2 - di_x2
        du_y1, du_y2 = da_y1 - di_y1, da_y2 - di_y2
        # enclosing-box derivatives
        dc_x1 = -ch * (px1 < gx1)
        dc_x2 = ch * (px2 > gx2)
        dc_y1 = -cw * (py1 < gy1)
        dc_y2 = cw * (py2 > gy2)
        # giou = inter/union + union/c_area - 1
        u2, c2 = union * union, c_area * c_area

        def dgiou(di, du, dc):
            return ((di * union - inter * du) / u2
                    + (du * c_area - union * dc) / c2)

        gx1_ = dgiou(di_x1, du_x1, dc_x1)
        gx2_ = dgiou(di_x2, du_x2, dc_x2)
        gy1_ = dgiou(di_y1, du_y1, dc_y1)
        gy2_ = dgiou(di_y2, du_y2, dc_y2)
        # corners -> cxcywh, flipping sign for the (1 - giou) output
        dp = g_l1 * l1_sign - g_giou * np.stack(
            [gx1_ + gx2_, gy1_ + gy2_,
             (gx2_ - gx1_) / 2, (gy2_ - gy1_) / 2], axis=1)
        full = np.zeros_like(boxes.data)
        np.add.at(full, qi, dp)
        Tensor._accum(boxes, full)

    return Tensor._from_op(data, (boxes,), bwd)


# ------------------------------------------------------------------ matching


def matching_cost(class_probs, boxes, gts, w: CostWeights | None = None):
    """Cost matrix |gts| x N_q from class probability, L1 and GIoU terms.

    ``class_probs`` is N_q x 3 softmax output, ``boxes`` N_q x 4, both plain
    arrays (the matcher is off-tape).
    """
    w = w or CostWeights()
    class_probs = np.asarray(class_probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    n_q = class_probs.shape[0]
    if len(gts) > n_q:
        raise ValueError(f"{len(gts)} ground truths exceed {n_q} query slots")
    cost = np.zeros((len(gts), n_q))
    for i, gt in enumerate(gts):
        label = LABELS[gt.label]
        for j in range(n_q):
            l1 = np.abs(gt.box - boxes[j]).sum()
            g = generalized_iou(gt.box, boxes[j])
            cost[i, j] = -w.cls * class_probs[j, label] + w.l1 * l1 + w.giou * (1.0 - g)
    return cost


def hungarian(cost):
    """Optimal injective assignment of rows to columns (rectangular, R <= C).

    Shortest-augmenting-path Kuhn-Munkres with potentials, O(R^2 C). Returns a
    list of (row, col) pairs covering every row, minimizing the total cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise ValueError(f"more rows than columns: {n} x {m}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")

    INF = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    # way[j]: previous column on the alternating path; col_row[j]: row matched to j
    col_row = np.full(m + 1, 0, dtype=np.int64)  # 0 = free (rows are 1-based)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        way = np.zeros(m + 1, dtype=np.int64)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    pairs = []
    for j in range(1, m + 1):
        if col_row[j] != 0:
            pairs.append((int(col_row[j]) - 1, j - 1))
    pairs.sort()
    return pairs


def match_predictions(class_logits, boxes, gts, w: CostWeights | None = None):
    """Softmax the logits, build the cost matrix, and solve the assignment."""
    if not gts:
        return []
    logits = np.asarray(class_logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    return hungarian(matching_cost(probs, boxes, gts, w))


# ---------------------------------------------------------------------- loss


def set_loss(class_logits: Tensor, boxes: Tensor, gts, assignment,
             w: CostWeights | None = None):
    """Training loss for one sample under a fixed assignment.

    Classification cross-entropy runs over all query slots (unmatched slots
    target no-object, down-weighted by ``w.noobj``); L1 and GIoU terms run over
    matched pairs only, normalized by the ground-truth count.

    Returns (total scalar Tensor, dict of detached part values).
    """
    w = w or CostWeights()
    n_q = class_logits.data.shape[0]
    targets = np.full(n_q, CLASS_NO_OBJECT, dtype=np.int64)
    for gi, pj in assignment:
        if not (0 <= gi < len(gts)) or not (0 <= pj < n_q):
            raise IndexError(f"assignment pair ({gi}, {pj}) out of range")
        targets[pj] = LABELS[gts[gi].label]
    slot_w = np.where(targets == CLASS_NO_OBJECT, w.noobj, 1.0)

    lsm = T.log_softmax(class_logits, axis=1)
    picked = lsm[np.arange(n_q), targets]
    loss_cls = -(picked * Tensor(slot_w)).sum() * (1.0 / slot_w.sum())

    denom = 1.0 / max(len(gts), 1)
    if assignment:
        terms = matched_box_terms(boxes, [pj for _, pj in assignment],
                                  [gts[gi].box for gi, _ in assignment])
        loss_l1 = terms[0:1].sum() * denom
        loss_giou = terms[1:2].sum() * denom
    else:
        loss_l1 = Tensor(0.0)
        loss_giou = Tensor(0.0)

    total = w.cls * loss_cls + w.l1 * loss_l1 + w.giou * loss_giou
    parts = {
        "loss_cls": loss_cls.item(),
        "loss_l1": loss_l1.item(),
        "loss_giou": loss_giou.item(),
    }
    return total, parts
