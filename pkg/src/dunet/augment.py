"""Live augmentation: each filter gets a freshly captured frame, captures are
spaced by a minimum gap, and geometric filters carry the box along."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from operator import attrgetter
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import AnnotatedDataset, FrameRecord, save_dataset, write_ppm
from .geometry import Box
from .tracker import TrackingLost, init_track, track_update

logger = logging.getLogger(__name__)

FILTER_KINDS = ("brightness", "contrast", "rotation", "flip", "shadow", "background", "color-shift")

DEFAULT_PARAMS: Dict[str, dict] = {
    "brightness": {"gain_range": [0.6, 1.4]},
    "contrast": {"factor_range": [0.6, 1.4]},
    "rotation": {"angle_range": [-15.0, 15.0]},
    "flip": {},
    "shadow": {"gain_range": [0.4, 0.8]},
    "background": {"texture": "checker", "tile": 8, "colors": [[200, 200, 200], [60, 60, 60]]},
    "color-shift": {"shift_range": [-30, 30]},
}


class SampleRejected(ValueError):
    """The transformed box collapsed to zero area."""


@dataclass
class FilterSpec:
    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}; expected one of {FILTER_KINDS}")
        if not self.weight > 0:
            raise ValueError(f"filter weight must be positive, got {self.weight}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        self.params = merged

    @classmethod
    def from_dict(cls, d: dict) -> "FilterSpec":
        return cls(d["kind"], float(d.get("weight", 1.0)), dict(d.get("params", {})))


def load_filters(config) -> List[FilterSpec]:
    """Filters from a list of ``{kind, weight, params}`` or a config with a ``filters`` key."""
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text())
    if isinstance(config, dict):
        config = config.get("filters", [])
    return [FilterSpec.from_dict(d) for d in config]


# ----------------------------------------------------------------------------
# scheduling


class WeightedRoundRobin:
    """Smooth weighted round robin: deterministic, proportional to weights."""

    def __init__(self, weights: Sequence[float]):
        if not weights:
            raise ValueError("need at least one filter")
        self.weights = [float(w) for w in weights]
        self.current = [0.0] * len(weights)
        self.total = sum(self.weights)

    def next(self) -> int:
        for i, w in enumerate(self.weights):
            self.current[i] += w
        pick = max(range(len(self.current)), key=lambda i: (self.current[i], -i))
        self.current[pick] -= self.total
        return pick


@dataclass
class Capture:
    item: object
    filter: FilterSpec
    ts: float


def schedule_captures(
    frames: Iterable, filters: Sequence[FilterSpec], min_gap_ms: float = 500.0, ts: Callable = attrgetter("ts")
) -> Iterator[Capture]:
    """Pick the first frame at least ``min_gap_ms`` after the previous capture
    and pair it with the next filter; every capture is a different frame."""
    if not filters:
        raise ValueError("no filters to apply")
    rr = WeightedRoundRobin([f.weight for f in filters])
    last: Optional[float] = None
    for item in frames:
        t = ts(item)
        if last is not None and t - last < min_gap_ms:
            continue
        last = t
        yield Capture(item, filters[rr.next()], t)


# ----------------------------------------------------------------------------
# filters


def _uniform(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_params(spec: FilterSpec, rng: np.random.Generator, width: int, height: int) -> dict:
    """Concrete parameters for one application; explicit values win over ranges."""
    p = spec.params
    k = spec.kind
    if k == "brightness":
        return {"gain": p.get("gain", _uniform(rng, p["gain_range"]))}
    if k == "contrast":
        return {"factor": p.get("factor", _uniform(rng, p["factor_range"]))}
    if k == "rotation":
        return {"angle": p.get("angle", _uniform(rng, p["angle_range"]))}
    if k == "flip":
        return {}
    if k == "shadow":
        return {
            "gain": p.get("gain", _uniform(rng, p["gain_range"])),
            "point": p.get("point", [float(rng.uniform(0, width)), float(rng.uniform(0, height))]),
            "theta": p.get("theta", float(rng.uniform(0, 2 * math.pi))),
        }
    if k == "background":
        out = {key: p[key] for key in ("texture", "tile", "colors", "color") if key in p}
        return out
    if k == "color-shift":
        lo, hi = p["shift_range"]
        return {"shift": p.get("shift", [int(v) for v in rng.integers(lo, hi + 1, 3)])}
    raise ValueError(k)


def _clamp_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def flip_frame(frame: np.ndarray, box: Box) -> Tuple[np.ndarray, Box]:
    return frame[:, ::-1].copy(), Box(1.0 - box.xmax, box.ymin, 1.0 - box.xmin, box.ymax)


def rotate_frame(frame: np.ndarray, box: Box, angle_deg: float, fill: int = 0) -> Tuple[np.ndarray, Box]:
    """Rotate counter-clockwise about the frame centre (nearest sampling).

    The box becomes the axis-aligned hull of its rotated corners, clamped.
    """
    h, w = frame.shape[:2]
    cx, cy = w / 2.0, h / 2.0
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)

    def fwd(x, y):
        dx, dy = x - cx, y - cy
        return cx + dx * c + dy * s, cy - dx * s + dy * c

    # inverse map: output pixel centre -> source location
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xx - cx, yy - cy
    sx = cx + dx * c - dy * s
    sy = cy + dx * s + dy * c
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.full_like(frame, fill)
    out[valid] = frame[iy[valid], ix[valid]]

    corners = [
        fwd(box.xmin * w, box.ymin * h),
        fwd(box.xmax * w, box.ymin * h),
        fwd(box.xmin * w, box.ymax * h),
        fwd(box.xmax * w, box.ymax * h),
    ]
    xs = [min(max(p[0], 0.0), w) / w for p in corners]
    ys = [min(max(p[1], 0.0), h) / h for p in corners]
    return out, Box(min(xs), min(ys), max(xs), max(ys))


def _box_pixel_mask(box: Box, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return (xx >= box.xmin * w) & (xx <= box.xmax * w) & (yy >= box.ymin * h) & (yy <= box.ymax * h)


def _background_texture(params: dict, h: int, w: int) -> np.ndarray:
    if "color" in params:
        return np.broadcast_to(np.asarray(params["color"], dtype=np.uint8), (h, w, 3))
    tile = int(params.get("tile", 8))
    colors = np.asarray(params.get("colors", [[200, 200, 200], [60, 60, 60]]), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    idx = ((yy // tile) + (xx // tile)) % len(colors)
    return colors[idx]


def apply_filter(
    frame: np.ndarray, box: Box, spec: FilterSpec, rng: Optional[np.random.Generator] = None, params: Optional[dict] = None
) -> Tuple[np.ndarray, Box]:
    """Apply one filter; photometric kinds return the box object unchanged.

    Raises SampleRejected when a geometric transform leaves a zero-area box.
    """
    h, w = frame.shape[:2]
    if params is None:
        params = sample_params(spec, rng if rng is not None else np.random.default_rng(0), w, h)
    f = frame.astype(np.float64)
    k = spec.kind
    if k == "brightness":
        return _clamp_u8(f * params["gain"]), box
    if k == "contrast":
        mean = f.mean(axis=(0, 1), keepdims=True)
        return _clamp_u8(mean + (f - mean) * params["factor"]), box
    if k == "color-shift":
        return _clamp_u8(f + np.asarray(params["shift"], dtype=np.float64)), box
    if k == "shadow":
        px, py = params["point"]
        nx, ny = math.cos(params["theta"]), math.sin(params["theta"])
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        side = (xx - px) * nx + (yy - py) * ny > 0
        gain = np.where(side, params["gain"], 1.0)[..., None]
        return _clamp_u8(f * gain), box
    if k == "background":
        inside = _box_pixel_mask(box, h, w)
        out = np.array(_background_texture(params, h, w), dtype=np.uint8)
        out[inside] = frame[inside]
        return out, box
    if k == "flip":
        out, nb = flip_frame(frame, box)
    elif k == "rotation":
        out, nb = rotate_frame(frame, box, params["angle"])
    else:
        raise ValueError(k)
    if nb.width * w < 1e-9 or nb.height * h < 1e-9:
        raise SampleRejected(f"{k} left a degenerate box {nb}")
    return out, nb


# ----------------------------------------------------------------------------
# capture pipeline


@dataclass
class Sample:
    frame_index: int
    ts: float
    kind: str
    params: dict
    tracked_box: Box
    box: Box


@dataclass
class CaptureResult:
    dataset: AnnotatedDataset
    samples: List[Sample]
    counts: Dict[str, int]
    lost: bool = False
    frames_seen: int = 0


@dataclass
class _Tracked:
    index: int
    ts: float
    image: np.ndarray
    box: Box


def _track(frames: Iterable, initial_box: Box, status: dict) -> Iterator[_Tracked]:
    state = None
    for fr in frames:
        status["seen"] = status.get("seen", 0) + 1
        if state is None:
            state = init_track(fr.image, initial_box)
        else:
            try:
                state = track_update(state, fr.image)
            except TrackingLost as exc:
                status["lost"] = exc
                return
        yield _Tracked(fr.index, fr.ts, fr.image, state.box)


def build_dataset(
    frames: Iterable,
    initial_box: Box,
    filters: Sequence[FilterSpec],
    out_dir,
    seed: int = 0,
    min_gap_ms: float = 500.0,
    label: str = "object",
) -> CaptureResult:
    """Track the seed box through ``frames`` and write filtered captures.

    A lost track ends capture early; whatever was captured is still written.
    """
    if not filters:
        raise ValueError("no filters to apply")
    rng = np.random.default_rng(seed)
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    records: List[FrameRecord] = []
    samples: List[Sample] = []
    counts: Counter = Counter()
    status: dict = {}
    for cap in schedule_captures(_track(frames, initial_box, status), filters, min_gap_ms):
        tr: _Tracked = cap.item
        h, w = tr.image.shape[:2]
        params = sample_params(cap.filter, rng, w, h)
        try:
            img, box = apply_filter(tr.image, tr.box, cap.filter, params=params)
        except SampleRejected as exc:
            logger.info("frame %d skipped: %s", tr.index, exc)
            continue
        rel = f"frames/{len(records):06d}.ppm"
        write_ppm(root / rel, img)
        records.append(FrameRecord(rel, tr.ts, w, h, [(1, box.clipped())], seq=0))
        samples.append(Sample(tr.index, tr.ts, cap.filter.kind, params, tr.box, box))
        counts[cap.filter.kind] += 1
    ds = AnnotatedDataset(root, [label], records)
    save_dataset(ds)
    lost = "lost" in status
    if lost:
        logger.warning("tracking lost after %d frames (%s); wrote %d samples", status["seen"], status["lost"], len(records))
    for kind in (f.kind for f in filters):
        logger.info("filter %s: %d samples", kind, counts[kind])
    return CaptureResult(ds, samples, dict(counts), lost, status.get("seen", 0))
