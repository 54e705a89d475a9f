import json
from collections import deque

import numpy as np
import pytest

from dunet.dataset import (
    DROSET_CLASSES,
    AnnotatedDataset,
    DatasetError,
    FrameRecord,
    is_small,
    letterbox,
    letterbox_boxes,
    load_dataset,
    read_image,
    save_dataset,
    split_dataset,
    unletterbox_box,
    write_ppm,
)
from dunet.geometry import Box
from dunet.shapes import BACKGROUND_MAX, gen_shapes_dataset, generate_shapes


def _write(root, labels, lines, images=()):
    root.mkdir(parents=True, exist_ok=True)
    (root / "labels.json").write_text(json.dumps(labels))
    (root / "annotations.jsonl").write_text("\n".join(json.dumps(l) for l in lines) + "\n")
    (root / "frames").mkdir(exist_ok=True)
    for name, (w, h) in images:
        write_ppm(root / name, np.zeros((h, w, 3), np.uint8))


def _line(name, boxes, w=8, h=6, **extra):
    return dict(image=name, ts=0.0, w=w, h=h, boxes=boxes, **extra)


def test_droset_label_map_loads_ten_classes(tmp_path):
    box = {"c": 10, "x0": 0.1, "y0": 0.1, "x1": 0.2, "y1": 0.3}
    _write(tmp_path, DROSET_CLASSES, [_line("frames/a.ppm", [box])], [("frames/a.ppm", (8, 6))])
    ds = load_dataset(tmp_path)
    assert ds.num_classes == 10
    assert ds.labels[0] == "christmas toy" and ds.labels[-1] == "tennis racket"
    assert ds.frames[0].boxes == [(10, Box(0.1, 0.1, 0.2, 0.3))]


def test_every_offending_line_is_reported(tmp_path):
    good = {"c": 1, "x0": 0.1, "y0": 0.1, "x1": 0.2, "y1": 0.3}
    inverted = {"c": 1, "x0": 0.5, "y0": 0.1, "x1": 0.2, "y1": 0.3}
    unknown = {"c": 3, "x0": 0.1, "y0": 0.1, "x1": 0.2, "y1": 0.3}
    lines = [
        _line("frames/a.ppm", [good]),
        _line("frames/a.ppm", [inverted]),
        _line("frames/missing.ppm", [good]),
        _line("frames/a.ppm", [unknown]),
        _line("frames/a.ppm", [good], w=9),
    ]
    _write(tmp_path, ["x", "y"], lines, [("frames/a.ppm", (8, 6))])
    (tmp_path / "annotations.jsonl").write_text((tmp_path / "annotations.jsonl").read_text() + "{not json\n")
    with pytest.raises(DatasetError) as err:
        load_dataset(tmp_path)
    probs = err.value.problems
    assert [p.split(":")[0] for p in probs] == ["line 2", "line 3", "line 4", "line 5", "line 6"]
    assert "inverted" in probs[0] and "missing image" in probs[1] and "unknown class" in probs[2]


def test_missing_files(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "labels.json").write_text("[1, 2]")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_save_load_round_trip(tmp_path):
    ds = gen_shapes_dataset(12, 32, tmp_path / "a", seed=5)
    back = load_dataset(tmp_path / "a")
    assert back == ds
    save_dataset(back, tmp_path / "b")
    for name in ("labels.json", "annotations.jsonl", "splits.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 11, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_image(tmp_path / "x.ppm"), img)


# -- splitting


def _seq_frames(n_seq, per_seq):
    return [FrameRecord(f"f{i}.ppm", float(i), 4, 4, [], i // per_seq) for i in range(n_seq * per_seq)]


def test_split_sizes_within_one_sequence():
    frames = _seq_frames(10, 10)
    for seed in range(20):
        sp = split_dataset(frames, (0.75, 0.15, 0.10), seed)
        for name, target in zip(("train", "val", "test"), (75, 15, 10)):
            assert abs(len(sp[name]) - target) <= 10
        seqs = {name: {frames[i].seq for i in idx} for name, idx in sp.items()}
        assert not (seqs["train"] & seqs["val"]) and not (seqs["train"] & seqs["test"]) and not (seqs["val"] & seqs["test"])
        assert sorted(sum(sp.values(), [])) == list(range(100))


def test_split_determinism_and_edge_cases():
    frames = _seq_frames(10, 3)
    assert split_dataset(frames, seed=3) == split_dataset(frames, seed=3)
    all_train = split_dataset(frames, (1, 0, 0))
    assert all_train["train"] == list(range(30)) and all_train["val"] == all_train["test"] == []
    with pytest.raises(ValueError):
        split_dataset(frames, (0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_dataset(_seq_frames(2, 5), (0.75, 0.15, 0.10))


def test_unsequenced_frames_split_individually():
    frames = [FrameRecord(f"f{i}.ppm", 0.0, 4, 4) for i in range(100)]
    sp = split_dataset(frames, seed=1)
    assert [len(sp[k]) for k in ("train", "val", "test")] == [75, 15, 10]


# -- shapes generator


def _components(mask):
    """Bounding boxes (x0, y0, x1, y1) of 8-connected foreground components."""
    seen = np.zeros_like(mask)
    out = []
    h, w = mask.shape
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        seen[sy, sx] = True
        q = deque([(sy, sx)])
        y0 = y1 = sy
        x0 = x1 = sx
        while q:
            y, x = q.popleft()
            y0, y1, x0, x1 = min(y0, y), max(y1, y), min(x0, x), max(x1, x)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        q.append((ny, nx))
        out.append((x0, y0, x1 + 1, y1 + 1))
    return sorted(out)


def test_shape_boxes_match_raster_extent():
    frames = generate_shapes(1000, 64, seed=11)
    assert len(frames) == 1000
    for img, boxes in frames:
        assert img.shape == (64, 64, 3)
        assert 1 <= len(boxes) <= 3
        fg = img.max(axis=2) > BACKGROUND_MAX
        expected = sorted(tuple(int(round(v * 64)) for v in b.as_tuple()) for _, b in boxes)
        assert _components(fg) == expected


def test_shapes_are_seed_deterministic(tmp_path):
    gen_shapes_dataset(20, 64, tmp_path / "a", seed=2)
    gen_shapes_dataset(20, 64, tmp_path / "b", seed=2)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 20 + 3
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_six_pixel_shapes_are_small_tier():
    for _, boxes in generate_shapes(50, 64, size_range=(6, 6), seed=4):
        for _, b in boxes:
            assert b.width == 0.09375 and is_small(b)


def test_small_tier_is_populated():
    boxes = [b for _, bs in generate_shapes(300, 64, seed=0) for _, b in bs]
    frac = np.mean([is_small(b) for b in boxes])
    assert 0.2 < frac < 0.5


def test_image_size_minimum():
    with pytest.raises(ValueError):
        generate_shapes(1, 16)


# -- letterboxing


def test_letterbox_box_round_trip():
    img = np.zeros((30, 60, 3), np.uint8)
    canvas, s, px, py = letterbox(img, 64)
    assert canvas.shape == (64, 64, 3) and (px, py) == (0, 16)
    box = Box(0.1, 0.2, 0.5, 0.9)
    lb = letterbox_boxes(np.array([box.as_tuple()]), 60, 30, 64, s, px, py)[0]
    back = unletterbox_box(Box(*lb), 60, 30, 64, s, px, py)
    assert np.allclose(back.as_tuple(), box.as_tuple(), atol=1e-12)


def test_split_accessor_without_splits():
    ds = AnnotatedDataset(None, ["a"], _seq_frames(1, 3), {})
    assert len(ds.split("train")) == 3 and ds.split("test") == []
