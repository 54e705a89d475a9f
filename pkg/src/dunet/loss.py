"""Multibox objective: softmax cross-entropy with hard negative mining plus
smooth-L1 box regression on positive anchors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from . import tensor as T
from .geometry import encode_array, match
from .tensor import DimensionError, Tensor


@dataclass
class LossParts:
    total: Tensor
    conf: float
    loc: float
    num_pos: int
    num_neg: int


def build_targets(
    anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: Sequence[int], pos_threshold: float = 0.5
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-anchor class labels (0 = background) and encoded box targets."""
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int64)
    targets = np.zeros((m, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return labels, targets
    assign = match(anchors, gt_boxes, pos_threshold)
    pos = assign >= 0
    cls = np.asarray(gt_classes, dtype=np.int64)
    labels[pos] = cls[assign[pos]]
    targets[pos] = encode_array(gt_boxes[assign[pos]], anchors[pos])
    return labels, targets


def mine_hard_negatives(bg_loss: np.ndarray, labels: np.ndarray, neg_pos_ratio: float = 3.0) -> np.ndarray:
    """Boolean mask of selected negatives, per image.

    Each image keeps its ``min(ratio * n_pos, n_neg)`` negatives with the
    largest background loss (lower anchor index wins ties). If the whole batch
    has no positive, the single hardest negative is kept instead.
    """
    bg_loss = np.asarray(bg_loss)
    labels = np.asarray(labels)
    sel = np.zeros(labels.shape, dtype=bool)
    neg = labels == 0
    if not (labels > 0).any():
        cand = np.where(neg, bg_loss, -np.inf).ravel()
        if neg.any():
            sel.ravel()[int(np.argmax(cand))] = True
        return sel
    for i in range(labels.shape[0]):
        n_pos = int((labels[i] > 0).sum())
        n_neg = int(neg[i].sum())
        take = min(int(neg_pos_ratio * n_pos), n_neg)
        if take <= 0:
            continue
        key = np.where(neg[i], -bg_loss[i], np.inf)
        order = np.argsort(key, kind="stable")
        sel[i, order[:take]] = True
    return sel


def multibox_loss(
    cls_logits: Tensor,
    box_preds: Tensor,
    labels: np.ndarray,
    targets: np.ndarray,
    neg_pos_ratio: float = 3.0,
    loc_weight: float = 1.0,
) -> LossParts:
    """``cls_logits[N, M, K+1]``, ``box_preds[N, M, 4]``; ``labels[N, M]`` with
    0 for background, ``targets[N, M, 4]`` encoded offsets (read on positives)."""
    labels = np.asarray(labels)
    if cls_logits.data.ndim != 3 or labels.shape != cls_logits.shape[:2]:
        raise DimensionError(f"labels {labels.shape} do not fit logits {cls_logits.shape}")
    if box_preds.shape != cls_logits.shape[:2] + (4,) or np.shape(targets) != box_preds.shape:
        raise DimensionError(f"box predictions {box_preds.shape} / targets {np.shape(targets)} mismatch")
    pos = labels > 0
    n_pos = int(pos.sum())
    bg_loss = -T.log_softmax(cls_logits.data)[..., 0]
    neg_sel = mine_hard_negatives(bg_loss, labels, neg_pos_ratio)
    weights = (pos | neg_sel).astype(float)
    conf = T.softmax_ce(cls_logits, labels, weights)
    loc = T.smooth_l1(box_preds, targets, pos.astype(float))
    norm = 1.0 / max(n_pos, 1)
    total = T.scale(T.add(conf, T.scale(loc, loc_weight)), norm)
    return LossParts(total, float(conf.data) * norm, float(loc.data) * norm, n_pos, int(neg_sel.sum()))
