"""Replay annotated frame streams against a detector under a drop-stale policy.

A bag is a directory holding ``stream.json`` (frame period, category and
per-frame timestamps/boxes) plus the frame images as binary PPM.
"""

from __future__ import annotations

import csv
import json
import shutil
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dataset import AnnotatedDataset, read_image, write_ppm
from .geometry import Box, Detection, iou

DRONE_PERIOD_MS = 1000.0 / 30.6
TIME_EPS = 1e-9


class StreamError(ValueError):
    pass


@dataclass
class StreamFrame:
    index: int
    ts: float
    image_path: str
    box: Box
    width: int
    height: int
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    @property
    def image(self) -> np.ndarray:
        return read_image(Path(self.root) / self.image_path)


@dataclass
class StreamSpec:
    frame_period_ms: float
    category: int
    frames: List[StreamFrame]
    label: str = ""
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def validate(self) -> None:
        if not self.frames:
            raise StreamError("stream has no frames")
        for a, b in zip(self.frames, self.frames[1:]):
            if not b.ts > a.ts:
                raise StreamError(f"timestamps not strictly increasing at frame {b.index}")


@dataclass
class StreamReport:
    name: str
    category: int
    label: str
    frames_total: int
    frames_processed: int
    frames_dropped: int
    tp: int
    fn: int
    fp: int
    wall_time_per_frame_ms: float
    normalized_time: float
    recall: float


# ----------------------------------------------------------------------------
# bag io


def write_bag(spec: StreamSpec, out_dir, images: Optional[Sequence[np.ndarray]] = None) -> Path:
    """Serialize ``spec``; images come from ``images`` or the spec's own root."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames_meta = []
    for i, fr in enumerate(spec.frames):
        rel = f"frames/{i:06d}.ppm"
        if images is not None:
            write_ppm(out / rel, images[i])
        elif fr.root is not None and (Path(fr.root) / fr.image_path).resolve() != (out / rel).resolve():
            src = Path(fr.root) / fr.image_path
            if src.suffix.lower() == ".ppm":
                shutil.copyfile(src, out / rel)
            else:
                write_ppm(out / rel, read_image(src))
        b = fr.box
        frames_meta.append(
            {"image": rel, "ts": fr.ts, "w": fr.width, "h": fr.height, "box": [b.xmin, b.ymin, b.xmax, b.ymax]}
        )
    meta = {"version": 1, "period_ms": spec.frame_period_ms, "category": spec.category, "label": spec.label, "frames": frames_meta}
    (out / "stream.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out


def read_bag(bag_dir) -> StreamSpec:
    bag_dir = Path(bag_dir)
    path = bag_dir / "stream.json"
    if not path.exists():
        raise StreamError(f"{bag_dir}: no stream.json")
    meta = json.loads(path.read_text())
    frames = [
        StreamFrame(i, float(f["ts"]), f["image"], Box(*f["box"]), int(f["w"]), int(f["h"]), bag_dir)
        for i, f in enumerate(meta["frames"])
    ]
    spec = StreamSpec(float(meta["period_ms"]), int(meta["category"]), frames, meta.get("label", ""), bag_dir)
    spec.validate()
    return spec


def make_bag(
    dataset: AnnotatedDataset,
    category: int,
    out_dir,
    frame_period_ms: float = DRONE_PERIOD_MS,
    split: Optional[str] = None,
) -> StreamSpec:
    """Bag the frames whose only annotation is one instance of ``category``,
    re-stamped at a fixed period."""
    frames = dataset.split(split) if split else dataset.frames
    chosen = [f for f in frames if len(f.boxes) == 1 and f.boxes[0][0] == category]
    if not chosen:
        raise StreamError(f"no frame contains exactly one instance of class {category}")
    label = dataset.labels[category - 1] if 0 < category <= len(dataset.labels) else ""
    spec = StreamSpec(
        frame_period_ms,
        category,
        [
            StreamFrame(i, i * frame_period_ms, f.image_path, f.boxes[0][1], f.width, f.height, Path(dataset.root))
            for i, f in enumerate(chosen)
        ],
        label,
    )
    write_bag(spec, out_dir)
    return read_bag(out_dir)


# ----------------------------------------------------------------------------
# scoring and replay


def score_frame(dets: Sequence[Detection], gt: Box, category: int, iou_threshold: float = 0.5):
    """(tp, fn, fp) for one processed frame with a single ground-truth box."""
    ours = sorted((d for d in dets if d.class_id == category), key=lambda d: (-d.score, d.index))
    if ours and iou(ours[0].box, gt) >= iou_threshold:
        return 1, 0, len(dets) - 1
    return 0, 1, len(dets)


class OracleDetector:
    """Returns the ground truth box of each frame with score 1."""

    def __init__(self, category: int):
        self.category = category

    def __call__(self, frame: StreamFrame) -> List[Detection]:
        return [Detection(frame.box, self.category, 1.0)]


def _schedule(arrivals: np.ndarray, latency_ms: float) -> List[int]:
    """Frame indices processed under drop-stale with a fixed latency.

    A frame that arrives while the detector is busy is dropped; once free,
    the detector takes the first frame arriving at or after that moment.
    """
    processed = []
    free = 0.0
    j = 0
    n = len(arrivals)
    while True:
        j = max(j, int(np.searchsorted(arrivals, free - TIME_EPS, side="left")))
        if j >= n:
            break
        processed.append(j)
        free = arrivals[j] + latency_ms
        j += 1
    return processed


def replay(
    spec: StreamSpec,
    detector: Callable[[StreamFrame], List[Detection]],
    latency_ms: Optional[float] = None,
    name: str = "detector",
    iou_threshold: float = 0.5,
) -> StreamReport:
    """Simulated clock when ``latency_ms`` is given, otherwise real threads.

    Simulated replay is a pure function of the spec, latency and detector
    outputs, so it is used for every reproducible measurement.
    """
    spec.validate()
    if latency_ms is None:
        return _replay_realtime(spec, detector, name, iou_threshold)
    if latency_ms < 0:
        raise StreamError("latency must be non-negative")
    arrivals = np.array([f.ts for f in spec.frames]) - spec.frames[0].ts
    order = _schedule(arrivals, latency_ms)
    tp = fn = fp = 0
    for j in order:
        fr = spec.frames[j]
        a, b, c = score_frame(detector(fr), fr.box, spec.category, iou_threshold)
        tp, fn, fp = tp + a, fn + b, fp + c
    return _report(spec, name, len(order), tp, fn, fp, latency_ms)


def _report(spec, name, processed, tp, fn, fp, mean_latency) -> StreamReport:
    total = len(spec.frames)
    norm = mean_latency / spec.frame_period_ms
    return StreamReport(
        name, spec.category, spec.label, total, processed, total - processed, tp, fn, fp,
        mean_latency, norm, tp / (tp + fn) if tp + fn else 0.0,
    )


def _replay_realtime(spec: StreamSpec, detector, name: str, iou_threshold: float) -> StreamReport:
    """Producer thread publishes frames on schedule into a one-slot mailbox.

    The detector waits for a frame published after it became free, matching
    the simulated schedule.
    """
    lock = threading.Condition()
    slot: List[Optional[StreamFrame]] = [None]
    done = [False]
    images = {}

    def produce():
        t0 = time.perf_counter()
        base = spec.frames[0].ts
        for fr in spec.frames:
            delay = (fr.ts - base) / 1000.0 - (time.perf_counter() - t0)
            if delay > 0:
                time.sleep(delay)
            with lock:
                slot[0] = fr
                lock.notify()
        with lock:
            done[0] = True
            lock.notify()

    for fr in spec.frames:  # decode up front so disk reads are not billed as latency
        images[fr.index] = fr.image

    class _Preloaded:
        def __init__(self, fr):
            self._fr = fr

        def __getattr__(self, item):
            return getattr(self._fr, item)

        @property
        def image(self):
            return images[self._fr.index]

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    tp = fn = fp = 0
    latencies = []
    while True:
        with lock:
            while slot[0] is None and not done[0]:
                lock.wait()
            fr = slot[0]
            slot[0] = None
            if fr is None and done[0]:
                break
        t = time.perf_counter()
        dets = detector(_Preloaded(fr))
        latencies.append((time.perf_counter() - t) * 1000.0)
        with lock:
            slot[0] = None  # whatever arrived while busy is stale
        a, b, c = score_frame(dets, fr.box, spec.category, iou_threshold)
        tp, fn, fp = tp + a, fn + b, fp + c
    th.join()
    return _report(spec, name, len(latencies), tp, fn, fp, float(np.mean(latencies)))


# ----------------------------------------------------------------------------
# reports

REPORT_FIELDS = [f for f in StreamReport.__dataclass_fields__]


def write_reports_csv(path, reports: Sequence[StreamReport]) -> None:
    rows = sorted(reports, key=lambda r: (r.normalized_time, r.name, r.category))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for r in rows:
            d = asdict(r)
            w.writerow([f"{d[k]:.6f}" if isinstance(d[k], float) else d[k] for k in REPORT_FIELDS])


def _svg(width: int, height: int) -> ET.Element:
    return ET.Element(
        "svg", {"xmlns": "http://www.w3.org/2000/svg", "width": str(width), "height": str(height), "viewBox": f"0 0 {width} {height}"}
    )


def _text(parent, x, y, s, size=11, anchor="start"):
    el = ET.SubElement(parent, "text", {"x": f"{x:.2f}", "y": f"{y:.2f}", "font-size": str(size), "text-anchor": anchor})
    el.text = s
    return el


def scatter_svg(reports: Sequence[StreamReport]) -> ET.Element:
    """Quality rates (TP, FN, FP per processed frame) against normalized time."""
    w, h, m = 520, 360, 50
    root = _svg(w, h)
    xmax = max(1.0, max(r.normalized_time for r in reports)) * 1.1
    rates = []
    for r in reports:
        n = max(r.frames_processed, 1)
        rates.append((r.tp / n, r.fn / n, r.fp / n))
    ymax = max(1.0, max(max(t) for t in rates)) * 1.05
    sx = lambda v: m + v / xmax * (w - 2 * m)
    sy = lambda v: h - m - v / ymax * (h - 2 * m)
    ET.SubElement(root, "line", {"x1": str(m), "y1": str(h - m), "x2": str(w - m), "y2": str(h - m), "stroke": "black"})
    ET.SubElement(root, "line", {"x1": str(m), "y1": str(m), "x2": str(m), "y2": str(h - m), "stroke": "black"})
    rt = sx(1.0)
    ET.SubElement(root, "line", {"x1": f"{rt:.2f}", "y1": str(m), "x2": f"{rt:.2f}", "y2": str(h - m), "stroke": "grey", "stroke-dasharray": "4 3"})
    _text(root, w / 2, h - 12, "processing time / real-time budget", anchor="middle")
    _text(root, 12, m - 12, "rate per processed frame")
    colours = {"tp": "#2a9d4a", "fn": "#e09f3e", "fp": "#c0392b"}
    for r, (tpr, fnr, fpr) in zip(reports, rates):
        for key, val in (("tp", tpr), ("fn", fnr), ("fp", fpr)):
            ET.SubElement(
                root, "circle",
                {"cx": f"{sx(r.normalized_time):.2f}", "cy": f"{sy(val):.2f}", "r": "4", "fill": colours[key],
                 "class": f"point {key}", "data-name": r.name, "data-x": repr(r.normalized_time), "data-y": repr(val)},
            )
    for i, (key, col) in enumerate(colours.items()):
        ET.SubElement(root, "circle", {"cx": str(w - m - 60), "cy": str(m + 14 * i), "r": "4", "fill": col})
        _text(root, w - m - 50, m + 4 + 14 * i, key.upper())
    return root


def bars_svg(reports: Sequence[StreamReport], unit: float = 1.0) -> ET.Element:
    """Per-category groups, one column per run: translucent processed-frame
    bar with the correct detections drawn solid on top; heights are
    ``value * unit`` pixels."""
    cats = sorted({(r.category, r.label) for r in reports})
    names = sorted({r.name for r in reports})
    col_w, gap, m = 14, 18, 40
    top = max(r.frames_processed for r in reports) * unit
    w = m * 2 + len(cats) * (len(names) * col_w + gap)
    h = int(top + 2 * m + 20)
    root = _svg(w, h)
    base = h - m
    x = m
    for cat, label in cats:
        for ni, name in enumerate(names):
            for r in reports:
                if r.category != cat or r.name != name:
                    continue
                for cls, value, opacity in (("processed", r.frames_processed, "0.35"), ("correct", r.tp, "1")):
                    ET.SubElement(
                        root, "rect",
                        {"x": f"{x + ni * col_w:.2f}", "y": f"{base - value * unit:.2f}", "width": str(col_w - 2),
                         "height": repr(value * unit), "fill": f"hsl({int(360 * ni / max(len(names), 1))},60%,45%)",
                         "fill-opacity": opacity, "class": cls, "data-name": name, "data-category": str(cat),
                         "data-value": str(value)},
                    )
        _text(root, x + len(names) * col_w / 2, base + 14, label or str(cat), size=10, anchor="middle")
        x += len(names) * col_w + gap
    return root


def compare_runs(reports: Sequence[StreamReport], out_dir, unit: float = 1.0) -> dict:
    if not reports:
        raise StreamError("no reports to compare")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "stream_report.csv", "scatter": out / "scatter.svg", "bars": out / "bars.svg"}
    write_reports_csv(paths["csv"], reports)
    ET.ElementTree(scatter_svg(reports)).write(paths["scatter"], encoding="utf-8", xml_declaration=True)
    ET.ElementTree(bars_svg(reports, unit)).write(paths["bars"], encoding="utf-8", xml_declaration=True)
    return paths
