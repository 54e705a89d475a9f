"""Anchors, overlap, ground-truth matching, offset coding and NMS.

Boxes are normalized ``(xmin, ymin, xmax, ymax)``; anchors are center form
``(cx, cy, w, h)``. The array helpers operate on ``[M, 4]`` float arrays and
are what the training loop uses; the dataclasses are for callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import DimensionError

VARIANCES = (0.1, 0.2)


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"invalid box {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def clipped(self) -> "Box":
        c = [min(max(v, 0.0), 1.0) for v in self.as_tuple()]
        return Box(*c)


@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    w: float
    h: float
    head: int = 0
    cell: int = 0

    def as_box(self) -> Box:
        return Box(self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    index: int = 0


class EncodingError(ValueError):
    pass


# ----------------------------------------------------------------------------
# anchors


def head_scales(n_heads: int = 4, smin: float = 0.1, smax: float = 0.8) -> List[float]:
    return [smin + (smax - smin) * i / (n_heads - 1) for i in range(n_heads)] + [0.95]


def anchor_shapes(scale: float, next_scale: float, count: int) -> List[Tuple[float, float]]:
    """(w, h) per anchor slot: ratios 1, 2, 1/2 at ``scale``, then ratio 1 at
    the geometric mean with the next head's scale; 3 and 1/3 if more are asked."""
    r2 = math.sqrt(2.0)
    r3 = math.sqrt(3.0)
    extra = math.sqrt(scale * next_scale)
    inventory = [
        (scale, scale),
        (scale * r2, scale / r2),
        (scale / r2, scale * r2),
        (extra, extra),
        (scale * r3, scale / r3),
        (scale / r3, scale * r3),
    ]
    if not 1 <= count <= len(inventory):
        raise ValueError(f"anchors per cell must be in 1..{len(inventory)}, got {count}")
    return inventory[:count]


def anchor_array(cfg) -> np.ndarray:
    """``[M, 4]`` center-form anchors, head-major, row-major cell, anchor minor."""
    scales = head_scales()
    rows = []
    for h, g in enumerate(cfg.grid_sizes):
        shapes = np.array(anchor_shapes(scales[h], scales[h + 1], cfg.anchors_per_cell))
        centers = (np.arange(g) + 0.5) / g
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        cell = np.stack([cx.ravel(), cy.ravel()], axis=1)
        block = np.empty((g * g, len(shapes), 4))
        block[:, :, 0:2] = cell[:, None, :]
        block[:, :, 2:4] = shapes[None, :, :]
        rows.append(block.reshape(-1, 4))
    return np.concatenate(rows, axis=0)


def generate_anchors(cfg) -> List[Anchor]:
    arr = anchor_array(cfg)
    heads = np.concatenate([np.full(g * g * cfg.anchors_per_cell, h) for h, g in enumerate(cfg.grid_sizes)])
    cells = np.concatenate([np.arange(g * g).repeat(cfg.anchors_per_cell) for g in cfg.grid_sizes])
    return [Anchor(*row, head=int(h), cell=int(c)) for row, h, c in zip(arr.tolist(), heads, cells)]


def center_to_corners(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return np.concatenate([a[..., :2] - a[..., 2:] / 2, a[..., :2] + a[..., 2:] / 2], axis=-1)


def corners_to_center(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _as_center_array(anchors) -> np.ndarray:
    if isinstance(anchors, np.ndarray):
        return anchors
    return np.array([[a.cx, a.cy, a.w, a.h] for a in anchors], dtype=float).reshape(-1, 4)


def _as_corner_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4)
    return np.array([b.as_tuple() for b in boxes], dtype=float).reshape(-1, 4)


# ----------------------------------------------------------------------------
# overlap


def iou(a: Box, b: Box) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner arrays ``a[n,4]`` and ``b[m,4]``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


# ----------------------------------------------------------------------------
# matching


def match(anchors, gt_boxes, pos_threshold: float = 0.5) -> np.ndarray:
    """Assign each anchor a ground-truth index, or -1 for negative.

    Stage 1 walks the ground truths in order and forces each onto its
    highest-IoU anchor not already forced by an earlier one (lowest index on
    ties). Stage 2 makes any other anchor with IoU >= ``pos_threshold`` to
    some box positive for its best box.
    """
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError(f"pos_threshold must lie in (0, 1), got {pos_threshold}")
    anc = center_to_corners(_as_center_array(anchors))
    gts = _as_corner_array(gt_boxes)
    labels = np.full(len(anc), -1, dtype=np.int64)
    if len(gts) == 0 or len(anc) == 0:
        return labels
    ov = iou_matrix(anc, gts)
    best_gt = ov.argmax(axis=1)
    best_ov = ov[np.arange(len(anc)), best_gt]
    pos = best_ov >= pos_threshold
    labels[pos] = best_gt[pos]
    forced = np.zeros(len(anc), dtype=bool)
    for j in range(len(gts)):
        col = np.where(forced, -np.inf, ov[:, j])
        a = int(col.argmax())
        if not np.isfinite(col[a]):
            break
        forced[a] = True
        labels[a] = j
    return labels


# ----------------------------------------------------------------------------
# offset coding


def encode_array(gt_corners: np.ndarray, anchors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    g = corners_to_center(gt_corners)
    a = np.asarray(anchors, dtype=float)
    if np.any(g[..., 2:] <= 0):
        raise EncodingError("ground-truth box must have positive width and height")
    v1, v2 = variances
    return np.concatenate(
        [(g[..., :2] - a[..., :2]) / (a[..., 2:] * v1), np.log(g[..., 2:] / a[..., 2:]) / v2], axis=-1
    )


def decode_array(offsets: np.ndarray, anchors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    t = np.asarray(offsets, dtype=float)
    a = np.asarray(anchors, dtype=float)
    v1, v2 = variances
    c = a[..., :2] + t[..., :2] * v1 * a[..., 2:]
    wh = a[..., 2:] * np.exp(np.clip(t[..., 2:] * v2, -20.0, 20.0))
    return np.concatenate([c - wh / 2, c + wh / 2], axis=-1)


def encode(gt: Box, anchor: Anchor, variances=VARIANCES) -> np.ndarray:
    if anchor.w <= 0 or anchor.h <= 0:
        raise EncodingError("anchor must have positive width and height")
    return encode_array(np.array(gt.as_tuple()), np.array([anchor.cx, anchor.cy, anchor.w, anchor.h]), variances)


def decode(offsets, anchor: Anchor, variances=VARIANCES) -> Box:
    b = decode_array(np.asarray(offsets, dtype=float), np.array([anchor.cx, anchor.cy, anchor.w, anchor.h]), variances)
    return Box(*b.tolist())


# ----------------------------------------------------------------------------
# suppression and decoding


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, max_out: int, order_key=None) -> np.ndarray:
    """Greedy suppression on one class; returns kept row indices in rank order."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    key = np.arange(len(scores)) if order_key is None else np.asarray(order_key)
    order = np.lexsort((key, -np.asarray(scores)))
    ov = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        kept.append(order[i])
        if len(kept) >= max_out:
            break
        suppressed |= ov[i] > iou_threshold
    return np.asarray(kept, dtype=np.int64)


def _rank(d: Detection):
    return (-d.score, d.index)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.45, max_out: int = 200) -> List[Detection]:
    """Per-class greedy NMS; output sorted by descending score (ties by index)."""
    kept: List[Detection] = []
    by_class = {}
    for d in detections:
        by_class.setdefault(d.class_id, []).append(d)
    for cls_dets in by_class.values():
        boxes = np.array([d.box.as_tuple() for d in cls_dets])
        scores = np.array([d.score for d in cls_dets])
        idx = nms_indices(boxes, scores, iou_threshold, max_out, [d.index for d in cls_dets])
        kept.extend(cls_dets[i] for i in idx)
    kept.sort(key=_rank)
    return kept[:max_out]


def flatten_head_outputs(head_outputs, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-head ``(scores[1, A(K+1), g, g], offsets[1, 4A, g, g])`` to ``[M, K+1]``, ``[M, 4]``."""
    logits, offs = [], []
    for scores, offsets in head_outputs:
        scores = np.asarray(scores)
        offsets = np.asarray(offsets)
        if scores.ndim != 4 or offsets.ndim != 4 or scores.shape[0] != 1:
            raise DimensionError(f"head outputs must be [1, C, g, g], got {scores.shape} / {offsets.shape}")
        if scores.shape[1] % (num_classes + 1) or offsets.shape[1] % 4:
            raise DimensionError(f"head channels {scores.shape[1]}/{offsets.shape[1]} do not fit K+1={num_classes + 1}")
        if scores.shape[2:] != offsets.shape[2:] or scores.shape[1] // (num_classes + 1) != offsets.shape[1] // 4:
            raise DimensionError(f"class and box head shapes disagree: {scores.shape} vs {offsets.shape}")
        logits.append(scores[0].transpose(1, 2, 0).reshape(-1, num_classes + 1))
        offs.append(offsets[0].transpose(1, 2, 0).reshape(-1, 4))
    return np.concatenate(logits), np.concatenate(offs)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_detections(
    head_outputs,
    anchors,
    num_classes: int,
    score_threshold: float = 0.01,
    iou_threshold: float = 0.45,
    max_out: int = 200,
    top_k: int = 400,
) -> List[Detection]:
    """Turn raw head outputs for one image into scored, suppressed detections.

    ``head_outputs`` is either the per-head list from the model or a
    pre-flattened ``(logits[M, K+1], offsets[M, 4])`` pair.
    """
    anc = _as_center_array(anchors)
    if isinstance(head_outputs, tuple) and len(head_outputs) == 2 and np.asarray(head_outputs[0]).ndim == 2:
        logits, offsets = (np.asarray(x) for x in head_outputs)
    else:
        logits, offsets = flatten_head_outputs(head_outputs, num_classes)
    if len(logits) != len(anc) or len(offsets) != len(anc):
        raise DimensionError(f"{len(logits)} predictions for {len(anc)} anchors")
    probs = softmax(logits)
    boxes = np.clip(decode_array(offsets, anc), 0.0, 1.0)
    out: List[Detection] = []
    for c in range(1, num_classes + 1):
        sc = probs[:, c]
        cand = np.nonzero(sc >= score_threshold)[0]
        if len(cand) == 0:
            continue
        if len(cand) > top_k:
            cand = cand[np.lexsort((cand, -sc[cand]))[:top_k]]
        keep = nms_indices(boxes[cand], sc[cand], iou_threshold, max_out, cand)
        for i in cand[keep]:
            b = boxes[i]
            if b[2] <= b[0] or b[3] <= b[1]:
                continue
            out.append(Detection(Box(*b.tolist()), c, float(sc[i]), int(i)))
    out.sort(key=_rank)
    return out[:max_out]
