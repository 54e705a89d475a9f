"""VOC-style average precision plus the precision / recall / accuracy triple."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, Detection, iou_matrix


@dataclass
class EvalResult:
    per_class_ap: Dict[int, float]
    mAP: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    accuracy: float
    per_class_counts: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)


def ratios(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    accuracy = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    return precision, recall, accuracy


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float = 0.5
) -> Tuple[List[bool], List[bool]]:
    """Greedy same-class matching in descending score order.

    Returns ``(is_tp per detection, found per gt)``; each detection claims the
    highest-IoU unclaimed gt at or above the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].index, i))
    is_tp = [False] * len(dets)
    found = [False] * len(gts)
    if not gts or not dets:
        return is_tp, found
    ov = iou_matrix(np.array([d.box.as_tuple() for d in dets]), np.array([g.as_tuple() for g in gts]))
    for i in order:
        row = np.where(found, -1.0, ov[i])
        j = int(row.argmax())
        if row[j] >= iou_threshold:
            found[j] = True
            is_tp[i] = True
    return is_tp, found


def average_precision(scored: Sequence[Tuple[float, bool]], num_gt: int, interp: str = "all") -> float:
    """AP from ``(score, is_tp)`` pairs.

    ``interp="all"`` integrates the monotone precision envelope over every
    recall step; ``"11point"`` averages the envelope at recall 0, 0.1, ..., 1.
    Detections with equal scores enter the curve together.
    """
    if num_gt <= 0:
        return 0.0
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    scores = np.array([scored[i][0] for i in order], dtype=float)
    hits = np.array([scored[i][1] for i in order], dtype=float)
    # one operating point per distinct score, so tied detections count together
    last = np.append(scores[1:] != scores[:-1], True)
    tp = np.cumsum(hits)[last]
    fp = np.cumsum(1.0 - hits)[last]
    rec = tp / num_gt
    prec = tp / (tp + fp)
    if interp == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = rec >= t - 1e-12
            ap += (prec[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    if interp != "all":
        raise ValueError(f"unknown AP interpolation {interp!r}")
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(
    all_dets: Sequence[Sequence[Detection]],
    all_gts: Sequence[Sequence[Tuple[int, Box]]],
    num_classes: int,
    iou_threshold: float = 0.5,
    count_threshold: float = 0.5,
    interp: str = "all",
    tier: Optional[Callable[[Box], bool]] = None,
) -> EvalResult:
    """Score a detector's per-frame outputs against per-frame ground truth.

    AP uses every detection; the tp/fp/fn counts only those scoring at least
    ``count_threshold``. mAP averages classes that have ground truth.

    With ``tier``, ground truth outside the tier is ignored: detections that
    hit an ignored box, or that are themselves outside the tier and hit
    nothing, are dropped instead of counted as false positives.
    """
    if len(all_dets) != len(all_gts):
        raise ValueError("detections and ground truth cover different frame counts")
    if not all_gts:
        raise ValueError("cannot evaluate an empty dataset")
    scored: Dict[int, List[Tuple[float, bool]]] = {c: [] for c in range(1, num_classes + 1)}
    npos = {c: 0 for c in range(1, num_classes + 1)}
    counts = {c: [0, 0, 0] for c in range(1, num_classes + 1)}
    for dets, gts in zip(all_dets, all_gts):
        for c in range(1, num_classes + 1):
            cg = [b for k, b in gts if k == c]
            cd = [d for d in dets if d.class_id == c]
            if tier is not None:
                cg, cd = _restrict_to_tier(cg, cd, tier, iou_threshold)
            npos[c] += len(cg)
            is_tp, _ = match_detections(cd, cg, iou_threshold)
            scored[c].extend((d.score, t) for d, t in zip(cd, is_tp))
            kept = [d for d in cd if d.score >= count_threshold]
            k_tp, k_found = match_detections(kept, cg, iou_threshold)
            counts[c][0] += sum(k_tp)
            counts[c][1] += len(kept) - sum(k_tp)
            counts[c][2] += len(cg) - sum(k_found)
    per_class = {c: average_precision(scored[c], npos[c], interp) for c in scored}
    with_gt = [c for c in per_class if npos[c] > 0]
    mAP = float(np.mean([per_class[c] for c in with_gt])) if with_gt else 0.0
    tp = sum(v[0] for v in counts.values())
    fp = sum(v[1] for v in counts.values())
    fn = sum(v[2] for v in counts.values())
    p, r, a = ratios(tp, fp, fn)
    return EvalResult(per_class, mAP, tp, fp, fn, p, r, a, {c: tuple(v) for c, v in counts.items()})


def _restrict_to_tier(gts: List[Box], dets: List[Detection], tier, iou_threshold: float):
    inside = [g for g in gts if tier(g)]
    outside = [g for g in gts if not tier(g)]
    is_tp, _ = match_detections(dets, inside, iou_threshold)
    kept = []
    for d, hit in zip(dets, is_tp):
        if not hit:
            if outside and iou_matrix(np.array([d.box.as_tuple()]), np.array([g.as_tuple() for g in outside])).max() >= iou_threshold:
                continue
            if not tier(d.box):
                continue
        kept.append(d)
    return inside, kept


def write_class_csv(path, result: EvalResult, labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "ap", "tp", "fp", "fn"])
        for c, ap in sorted(result.per_class_ap.items()):
            tp, fp, fn = result.per_class_counts.get(c, (0, 0, 0))
            w.writerow([labels[c - 1] if c - 1 < len(labels) else str(c), f"{ap:.6f}", tp, fp, fn])
        w.writerow(["mAP", f"{result.mAP:.6f}", result.tp, result.fp, result.fn])


def evaluate(
    detector: Callable[[np.ndarray], List[Detection]],
    images: Sequence[np.ndarray],
    gts: Sequence[Sequence[Tuple[int, Box]]],
    num_classes: int,
    iou_threshold: float = 0.5,
    count_threshold: float = 0.5,
    interp: str = "all",
) -> EvalResult:
    if not images:
        raise ValueError("cannot evaluate an empty dataset")
    dets = [detector(img) for img in images]
    return evaluate_detections(dets, gts, num_classes, iou_threshold, count_threshold, interp)
