"""Brute-force normalized cross-correlation tracker used to propagate a seed
box from frame to frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Box

LOST_BELOW = 0.3
SEARCH_FRACTION = 0.25
TEMPLATE_KEEP = 0.9


class TrackingLost(RuntimeError):
    def __init__(self, confidence: float, box: Box):
        self.confidence = confidence
        self.box = box
        super().__init__(f"tracking lost (peak NCC {confidence:.3f} < {LOST_BELOW})")


@dataclass
class TrackState:
    template: np.ndarray  # grey, float, box-sized
    box: Box
    confidence: float = 1.0


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized correlation of two equal-size patches; 0 if either is flat."""
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum() * (b * b).sum()))
    if den <= 1e-12:
        return 0.0
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def ncc_map(template: np.ndarray, region: np.ndarray) -> np.ndarray:
    """NCC of ``template`` at every valid offset inside ``region``."""
    th, tw = template.shape
    t = template - template.mean()
    tnorm = math.sqrt(float((t * t).sum()))
    win = sliding_window_view(region, (th, tw))
    wmean = win.mean(axis=(-2, -1), keepdims=True)
    wc = win - wmean
    num = np.einsum("ijkl,kl->ij", wc, t)
    wnorm = np.sqrt((wc * wc).sum(axis=(-2, -1)))
    den = wnorm * tnorm
    out = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)
    return np.clip(out, -1.0, 1.0)


def _pixel_box(box: Box, w: int, h: int):
    x0, y0 = int(round(box.xmin * w)), int(round(box.ymin * h))
    x1, y1 = int(round(box.xmax * w)), int(round(box.ymax * h))
    return x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)


def init_track(frame: np.ndarray, box: Box) -> TrackState:
    gray = to_gray(frame)
    h, w = gray.shape
    x0, y0, x1, y1 = _pixel_box(box, w, h)
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise ValueError(f"seed box {box} lies outside the {w}x{h} frame")
    return TrackState(gray[y0:y1, x0:x1].copy(), box, 1.0)


def track_update(state: TrackState, frame: np.ndarray) -> TrackState:
    """Move the box to the NCC peak within +-25% of its size.

    Raises TrackingLost when the peak correlation falls below 0.3.
    """
    if state.template.size == 0:
        raise ValueError("empty template")
    gray = to_gray(frame)
    h, w = gray.shape
    x0, y0, x1, y1 = _pixel_box(state.box, w, h)
    bw, bh = x1 - x0, y1 - y0
    th, tw = state.template.shape
    mx = int(math.ceil(SEARCH_FRACTION * bw))
    my = int(math.ceil(SEARCH_FRACTION * bh))
    rx0, ry0 = max(0, x0 - mx), max(0, y0 - my)
    rx1, ry1 = min(w, x0 + mx + tw), min(h, y0 + my + th)
    if rx1 - rx0 < tw or ry1 - ry0 < th:
        raise TrackingLost(0.0, state.box)
    scores = ncc_map(state.template, gray[ry0:ry1, rx0:rx1])
    dy_grid, dx_grid = np.mgrid[0 : scores.shape[0], 0 : scores.shape[1]]
    dxs = dx_grid + rx0 - x0
    dys = dy_grid + ry0 - y0
    # highest score, then smallest displacement, then scan order
    order = np.lexsort(((dxs * dxs + dys * dys).ravel(), -scores.ravel()))
    best = order[0]
    peak = float(scores.ravel()[best])
    dx, dy = int(dxs.ravel()[best]), int(dys.ravel()[best])
    nx0, ny0 = x0 + dx, y0 + dy
    new_box = Box(nx0 / w, ny0 / h, (nx0 + tw) / w, (ny0 + th) / h)
    if peak < LOST_BELOW:
        raise TrackingLost(peak, new_box)
    patch = gray[ny0 : ny0 + th, nx0 : nx0 + tw]
    template = TEMPLATE_KEEP * state.template + (1.0 - TEMPLATE_KEEP) * patch
    return TrackState(template, new_box, peak)
