"""Frame sources: numbered image directories, bag directories and a synthetic
translating-square sequence with known ground truth."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .dataset import read_image, write_ppm
from .geometry import Box

DRONE_FPS = 30.6


@dataclass
class Frame:
    index: int
    ts: float
    image: np.ndarray


def directory_source(path, fps: float = DRONE_FPS) -> Iterator[Frame]:
    """Numbered ``.ppm``/``.png`` files in name order, stamped at ``fps``."""
    files = sorted(
        (p for p in Path(path).iterdir() if p.suffix.lower() in (".ppm", ".png")),
        key=lambda p: [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)],
    )
    period = 1000.0 / fps
    for i, p in enumerate(files):
        yield Frame(i, i * period, read_image(p))


def bag_source(bag_dir) -> Iterator[Frame]:
    bag_dir = Path(bag_dir)
    meta = json.loads((bag_dir / "stream.json").read_text())
    for i, f in enumerate(meta["frames"]):
        yield Frame(i, float(f["ts"]), read_image(bag_dir / f["image"]))


def frame_source(path, fps: float = DRONE_FPS) -> Iterator[Frame]:
    path = Path(path)
    if (path / "stream.json").exists():
        return bag_source(path)
    return directory_source(path, fps)


def textured_patch(size: int, seed: int = 7) -> np.ndarray:
    """A high-contrast random-block texture so template matching has signal."""
    rng = np.random.default_rng(seed)
    cells = rng.integers(120, 256, (size // 4 + 1, size // 4 + 1, 3))
    return np.kron(cells, np.ones((4, 4, 1)))[:size, :size].astype(np.uint8)


def translating_square(
    n_frames: int = 200,
    width: int = 160,
    height: int = 120,
    side: int = 24,
    velocity: Tuple[int, int] = (1, 1),
    start: Tuple[int, int] = (20, 30),
    fps: float = 30.0,
    period_ms: Optional[float] = None,
    background: int = 40,
) -> Tuple[List[Frame], List[Box]]:
    """Textured square bouncing around a flat background, moving whole pixels
    per frame. Returns the frames and the exact normalized box per frame."""
    period = period_ms if period_ms is not None else 1000.0 / fps
    patch = textured_patch(side)
    x, y = start
    vx, vy = velocity
    frames, boxes = [], []
    for i in range(n_frames):
        img = np.full((height, width, 3), background, dtype=np.uint8)
        img[y : y + side, x : x + side] = patch
        frames.append(Frame(i, i * period, img))
        boxes.append(Box(x / width, y / height, (x + side) / width, (y + side) / height))
        if not 0 <= x + vx <= width - side:
            vx = -vx
        if not 0 <= y + vy <= height - side:
            vy = -vy
        x += vx
        y += vy
    return frames, boxes


def write_frames(frames: List[Frame], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_ppm(out / f"{f.index:06d}.ppm", f.image)
    return out
