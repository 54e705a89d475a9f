"""Synthetic circles/squares/triangles on a noise background.

Background pixels have every channel <= 110 and every shape colour has a
channel >= 150, so a shape's pixels can be recovered by exact colour match;
shapes in one frame get distinct colours and never touch.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .dataset import SMALL_TIER_MAX, AnnotatedDataset, FrameRecord, save_dataset, split_dataset, write_ppm
from .geometry import Box

SHAPE_CLASSES = ["circle", "square", "triangle"]
BACKGROUND_MAX = 110
FRAME_PERIOD_MS = 1000.0 / 30.6


def shape_mask(kind: str, d: int) -> np.ndarray:
    yy, xx = np.mgrid[0:d, 0:d] + 0.5
    if kind == "square":
        return np.ones((d, d), dtype=bool)
    if kind == "circle":
        r = d / 2.0
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    if kind == "triangle":
        # apex at the top centre, base along the bottom row
        return np.abs(xx - d / 2.0) <= (yy + 0.5) / 2.0
    raise ValueError(f"unknown shape {kind!r}")


def _pick_size(rng: np.random.Generator, image_size: int, size_range, small_fraction: float) -> int:
    lo, hi = size_range
    small_hi = int(np.floor(SMALL_TIER_MAX * image_size))
    tiers = []
    if lo <= min(hi, small_hi):
        tiers.append((lo, min(hi, small_hi)))
    if max(lo, small_hi + 1) <= hi:
        tiers.append((max(lo, small_hi + 1), hi))
    if len(tiers) == 2:
        t = tiers[0] if rng.random() < small_fraction else tiers[1]
    else:
        t = tiers[0]
    return int(rng.integers(t[0], t[1] + 1))


def _colour(rng: np.random.Generator, used: List[Tuple[int, int, int]]) -> Tuple[int, int, int]:
    while True:
        c = rng.integers(0, 256, 3)
        c[rng.integers(0, 3)] = rng.integers(150, 256)
        t = tuple(int(v) for v in c)
        if t not in used:
            return t


def render_frame(
    rng: np.random.Generator,
    image_size: int = 64,
    size_range=(6, 24),
    small_fraction: float = 0.35,
    max_shapes: int = 3,
) -> Tuple[np.ndarray, List[Tuple[int, Box]]]:
    s = image_size
    img = rng.integers(0, BACKGROUND_MAX + 1, (s, s, 3)).astype(np.uint8)
    n = int(rng.integers(1, max_shapes + 1))
    placed: List[Tuple[int, int, int, int]] = []  # pixel extents, inclusive-exclusive
    colours: List[Tuple[int, int, int]] = []
    boxes: List[Tuple[int, Box]] = []
    for _ in range(n):
        cls = int(rng.integers(0, len(SHAPE_CLASSES)))
        d = min(_pick_size(rng, s, size_range, small_fraction), s)
        mask = shape_mask(SHAPE_CLASSES[cls], d)
        for _attempt in range(50):
            x = int(rng.integers(0, s - d + 1))
            y = int(rng.integers(0, s - d + 1))
            if all(x + d + 1 <= px0 or px1 + 1 <= x or y + d + 1 <= py0 or py1 + 1 <= y for px0, py0, px1, py1 in placed):
                break
        else:
            continue
        col = _colour(rng, colours)
        colours.append(col)
        region = img[y : y + d, x : x + d]
        region[mask] = col
        ys, xs = np.nonzero(mask)
        x0, x1 = x + xs.min(), x + xs.max() + 1
        y0, y1 = y + ys.min(), y + ys.max() + 1
        placed.append((x, y, x + d, y + d))
        boxes.append((cls + 1, Box(x0 / s, y0 / s, x1 / s, y1 / s)))
    return img, boxes


def generate_shapes(
    n_frames: int, image_size: int = 64, size_range=(6, 24), seed: int = 0, small_fraction: float = 0.35
) -> List[Tuple[np.ndarray, List[Tuple[int, Box]]]]:
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    rng = np.random.default_rng(seed)
    return [render_frame(rng, image_size, size_range, small_fraction) for _ in range(n_frames)]


def gen_shapes_dataset(
    n_frames: int,
    image_size: int,
    out_dir,
    seed: int = 0,
    size_range=(6, 24),
    small_fraction: float = 0.35,
    ratios: Optional[Tuple[float, float, float]] = (0.75, 0.15, 0.10),
) -> AnnotatedDataset:
    """Render ``n_frames`` frames as PPM files under ``out_dir`` and write annotations."""
    root = Path(out_dir)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, boxes) in enumerate(generate_shapes(n_frames, image_size, size_range, seed, small_fraction)):
        rel = f"frames/{i:06d}.ppm"
        write_ppm(root / rel, img)
        frames.append(FrameRecord(rel, round(i * FRAME_PERIOD_MS, 3), image_size, image_size, boxes))
    splits = split_dataset(frames, ratios, seed) if ratios is not None and len(frames) >= 3 else {}
    ds = AnnotatedDataset(root, list(SHAPE_CLASSES), frames, splits)
    save_dataset(ds)
    return ds
