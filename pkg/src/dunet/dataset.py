"""On-disk annotated datasets: ``labels.json`` + ``annotations.jsonl`` + images.

Annotation lines look like::

    {"image": "frames/000123.ppm", "ts": 4020.1, "w": 640, "h": 360,
     "boxes": [{"c": 3, "x0": 0.1, "y0": 0.2, "x1": 0.3, "y1": 0.5}]}

Class ids are 1-based indices into ``labels.json``; 0 is background. An
optional ``"seq"`` key groups frames of one capture sequence for splitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Box

DROSET_CLASSES = [
    "christmas toy",
    "coffee machine",
    "potted plant",
    "tissue box",
    "robot",
    "soccer ball",
    "turtle bot",
    "UAV",
    "fire alarm",
    "tennis racket",
]

SPLIT_NAMES = ("train", "val", "test")
SMALL_TIER_MAX = 0.1


class DatasetError(ValueError):
    """Raised with every offending line when a dataset fails validation."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("dataset invalid:\n  " + "\n  ".join(self.problems))


@dataclass
class FrameRecord:
    image_path: str
    timestamp_ms: float
    width: int
    height: int
    boxes: List[Tuple[int, Box]] = field(default_factory=list)
    seq: Optional[int] = None

    def to_json(self) -> dict:
        d = {
            "image": self.image_path,
            "ts": self.timestamp_ms,
            "w": self.width,
            "h": self.height,
            "boxes": [{"c": c, "x0": b.xmin, "y0": b.ymin, "x1": b.xmax, "y1": b.ymax} for c, b in self.boxes],
        }
        if self.seq is not None:
            d["seq"] = self.seq
        return d

    def gt_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        boxes = np.array([b.as_tuple() for _, b in self.boxes], dtype=float).reshape(-1, 4)
        classes = np.array([c for c, _ in self.boxes], dtype=np.int64)
        return boxes, classes


@dataclass
class AnnotatedDataset:
    root: Path
    labels: List[str]
    frames: List[FrameRecord]
    splits: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> List[FrameRecord]:
        if name not in self.splits:
            return list(self.frames) if not self.splits and name == "train" else []
        return [self.frames[i] for i in self.splits[name]]

    def image(self, frame: FrameRecord) -> np.ndarray:
        return read_image(Path(self.root) / frame.image_path)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnnotatedDataset):
            return NotImplemented
        return self.labels == other.labels and self.frames == other.frames and self.splits == other.splits


def is_small(box: Box, limit: float = SMALL_TIER_MAX) -> bool:
    return max(box.width, box.height) <= limit


# ----------------------------------------------------------------------------
# images


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def image_size(path) -> Tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def letterbox(image: np.ndarray, size: int, fill: int = 0) -> Tuple[np.ndarray, float, int, int]:
    """Fit ``image`` into a ``size`` square keeping aspect; returns canvas, scale, pad x, pad y."""
    h, w = image.shape[:2]
    if h == size and w == size:
        return image, 1.0, 0, 0
    s = size / max(h, w)
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    canvas = np.full((size, size, 3), fill, dtype=np.uint8)
    px, py = (size - nw) // 2, (size - nh) // 2
    canvas[py : py + nh, px : px + nw] = resized
    return canvas, s, px, py


def unletterbox_box(box: Box, frame_w: int, frame_h: int, size: int, s: float, px: int, py: int) -> Box:
    x0 = (box.xmin * size - px) / (s * frame_w)
    y0 = (box.ymin * size - py) / (s * frame_h)
    x1 = (box.xmax * size - px) / (s * frame_w)
    y1 = (box.ymax * size - py) / (s * frame_h)
    return Box(x0, y0, max(x0, x1), max(y0, y1)).clipped()


def letterbox_boxes(boxes: np.ndarray, frame_w: int, frame_h: int, size: int, s: float, px: int, py: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=float).reshape(-1, 4).copy()
    b[:, [0, 2]] = (b[:, [0, 2]] * frame_w * s + px) / size
    b[:, [1, 3]] = (b[:, [1, 3]] * frame_h * s + py) / size
    return b


def to_input(image: np.ndarray) -> np.ndarray:
    """uint8 ``[H, W, 3]`` to float ``[3, H, W]`` in [-1, 1]."""
    return image.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


# ----------------------------------------------------------------------------
# load / save


def _parse_line(text: str, lineno: int, n_classes: int, problems: List[str]) -> Optional[FrameRecord]:
    try:
        d = json.loads(text)
        image = d["image"]
        ts = float(d.get("ts", 0.0))
        w, h = int(d["w"]), int(d["h"])
        raw_boxes = d.get("boxes", [])
    except (ValueError, KeyError, TypeError) as exc:
        problems.append(f"line {lineno}: malformed annotation ({exc})")
        return None
    boxes = []
    ok = True
    for bi, rb in enumerate(raw_boxes):
        try:
            c = int(rb["c"])
            x0, y0, x1, y1 = (float(rb[k]) for k in ("x0", "y0", "x1", "y1"))
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"line {lineno}: box {bi} malformed ({exc})")
            ok = False
            continue
        if not 1 <= c <= n_classes:
            problems.append(f"line {lineno}: box {bi} has unknown class id {c}")
            ok = False
        if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
            problems.append(f"line {lineno}: box {bi} out of range or inverted ({x0}, {y0}, {x1}, {y1})")
            ok = False
            continue
        boxes.append((c, Box(x0, y0, x1, y1)))
    if not ok:
        return None
    return FrameRecord(image, ts, w, h, boxes, d.get("seq"))


def load_dataset(root, check_images: bool = True) -> AnnotatedDataset:
    root = Path(root)
    problems: List[str] = []
    try:
        labels = json.loads((root / "labels.json").read_text())
    except FileNotFoundError:
        raise DatasetError([f"{root / 'labels.json'}: missing"])
    except ValueError as exc:
        raise DatasetError([f"labels.json: {exc}"])
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise DatasetError(["labels.json: expected an array of class names"])
    ann_path = root / "annotations.jsonl"
    if not ann_path.exists():
        raise DatasetError([f"{ann_path}: missing"])
    frames: List[FrameRecord] = []
    for lineno, text in enumerate(ann_path.read_text().splitlines(), start=1):
        if not text.strip():
            continue
        rec = _parse_line(text, lineno, len(labels), problems)
        if rec is None:
            continue
        if check_images:
            img_path = root / rec.image_path
            if not img_path.exists():
                problems.append(f"line {lineno}: missing image {rec.image_path}")
                continue
            if image_size(img_path) != (rec.width, rec.height):
                problems.append(
                    f"line {lineno}: image {rec.image_path} is {image_size(img_path)}, header says {(rec.width, rec.height)}"
                )
                continue
        frames.append(rec)
    if problems:
        raise DatasetError(problems)
    splits: Dict[str, List[int]] = {}
    sp = root / "splits.json"
    if sp.exists():
        splits = {k: [int(i) for i in v] for k, v in json.loads(sp.read_text()).items()}
    return AnnotatedDataset(root, list(labels), frames, splits)


def save_dataset(ds: AnnotatedDataset, root=None) -> Path:
    root = Path(root if root is not None else ds.root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.json").write_text(json.dumps(ds.labels) + "\n")
    with open(root / "annotations.jsonl", "w") as fh:
        for f in ds.frames:
            fh.write(json.dumps(f.to_json()) + "\n")
    if ds.splits:
        (root / "splits.json").write_text(json.dumps(ds.splits) + "\n")
    return root


# ----------------------------------------------------------------------------
# splitting


def split_dataset(
    frames: Sequence[FrameRecord], ratios=(0.75, 0.15, 0.10), seed: int = 0
) -> Dict[str, List[int]]:
    """Assign whole capture sequences to train/val/test.

    Frames without a ``seq`` each form their own sequence. Sequences are
    shuffled with ``seed`` and each goes to the split furthest below its
    target frame count.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative values summing to 1, got {ratios}")
    groups: Dict[object, List[int]] = {}
    for i, f in enumerate(frames):
        key = ("seq", f.seq) if f.seq is not None else ("frame", i)
        groups.setdefault(key, []).append(i)
    active = [k for k, r in enumerate(ratios) if r > 0]
    if len(groups) < len(active):
        raise ValueError(f"{len(groups)} sequences cannot fill {len(active)} non-empty splits")
    rng = np.random.default_rng(seed)
    keys = list(groups)
    order = rng.permutation(len(keys))
    total = len(frames)
    target = [r * total for r in ratios]
    got = [0, 0, 0]
    out: Dict[str, List[int]] = {name: [] for name in SPLIT_NAMES}
    # guarantee every non-empty split a sequence before balancing the rest
    queue = [keys[i] for i in order]
    for k, key in zip(active, queue[: len(active)]):
        out[SPLIT_NAMES[k]].extend(groups[key])
        got[k] += len(groups[key])
    for key in queue[len(active) :]:
        k = max(active, key=lambda s: (target[s] - got[s], -s))
        out[SPLIT_NAMES[k]].extend(groups[key])
        got[k] += len(groups[key])
    for name in out:
        out[name].sort()
    return out
