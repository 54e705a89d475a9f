"""``dunet`` command line: train, eval, streambench, augment, genshapes.

Exit codes: 0 ok, 2 usage/config error, 3 numeric failure, 4 incompatible
checkpoint/dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import tensor as T
from .augment import build_dataset, load_filters
from .dataset import DatasetError, is_small, load_dataset
from .geometry import Box
from .inference import ModelDetector
from .metrics import evaluate_detections, write_class_csv
from .model import ConfigError, DUNet, DUNetConfig
from .shapes import gen_shapes_dataset
from .sources import frame_source
from .stream import OracleDetector, StreamError, compare_runs, read_bag, replay
from .train import TrainConfig, TrainingDiverged, prepare_samples, thread_limit, train

log = logging.getLogger("dunet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        super().__init__(msg)
        self.code = code


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except ValueError as exc:
        raise CliError(f"cannot parse {path}: {exc}")


def _model_config(path) -> DUNetConfig:
    d = _read_json(path)
    d = d.get("model", d)
    try:
        cfg = DUNetConfig.from_dict(d)
        cfg.validate()
    except (ConfigError, TypeError) as exc:
        raise CliError(str(exc))
    return cfg


def _load_model(checkpoint: Path, config: Optional[str]) -> DUNet:
    cfg_path = Path(config) if config else checkpoint.parent / "model.json"
    cfg = _model_config(cfg_path)
    try:
        state = T.load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {checkpoint}")
    except T.CheckpointError as exc:
        raise CliError(str(exc), EXIT_INCOMPATIBLE)
    model = DUNet(cfg)
    try:
        model.load_state_dict(state)
    except T.DimensionError as exc:
        raise CliError(f"checkpoint does not fit model config: {exc}", EXIT_INCOMPATIBLE)
    return model


# ----------------------------------------------------------------------------


def cmd_train(args) -> int:
    conf = _read_json(args.config)
    try:
        ds = load_dataset(conf.get("dataset", {}).get("root") or args.dataset)
    except (DatasetError, TypeError) as exc:
        raise CliError(f"dataset: {exc}")
    model_d = dict(conf.get("model", {}))
    model_d.setdefault("num_classes", ds.num_classes)
    try:
        cfg = DUNetConfig.from_dict(model_d)
        cfg.validate()
        tcfg = TrainConfig.from_dict(conf.get("train", {}))
        if args.seed is not None:
            tcfg.seed = args.seed
        if args.steps is not None:
            tcfg.max_steps = args.steps
        tcfg.validate()
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(str(exc))
    if cfg.num_classes != ds.num_classes:
        raise CliError(f"model has {cfg.num_classes} classes, dataset has {ds.num_classes}", EXIT_INCOMPATIBLE)
    out = Path(args.out or conf.get("out", "run"))
    split = conf.get("dataset", {}).get("split", "train")
    frames = ds.split(split)
    if not frames:
        raise CliError(f"dataset split {split!r} is empty")
    samples = prepare_samples(ds, frames, cfg.input_size)
    model = DUNet(cfg, seed=tcfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(cfg.to_json() + "\n")
    try:
        res = train(model, samples, tcfg, out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {tcfg.max_steps} steps; final loss {res.losses[-1][1]:.4f}" if res.losses else "trained 0 steps")
    print(f"checkpoint: {res.checkpoint}")
    print(f"loss curve: {out / 'loss.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(Path(args.checkpoint), args.config)
    try:
        ds = load_dataset(args.dataset)
    except DatasetError as exc:
        raise CliError(f"dataset: {exc}")
    if ds.num_classes != model.cfg.num_classes:
        raise CliError(f"checkpoint has {model.cfg.num_classes} classes, dataset has {ds.num_classes}", EXIT_INCOMPATIBLE)
    frames = ds.split(args.split) if args.split else ds.frames
    if not frames:
        raise CliError(f"split {args.split!r} is empty")
    det = ModelDetector(model, score_threshold=args.score_thresh)
    dets = det.detect_batch([ds.image(f) for f in frames])
    gts = [f.boxes for f in frames]
    res = evaluate_detections(dets, gts, ds.num_classes, args.iou_thresh, interp=args.ap_interp)
    small = evaluate_detections(dets, gts, ds.num_classes, args.iou_thresh, interp=args.ap_interp, tier=is_small)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_class_csv(out / "eval_classes.csv", res, ds.labels)
    summary = {
        "mAP": res.mAP, "small_mAP": small.mAP, "precision": res.precision, "recall": res.recall,
        "accuracy": res.accuracy, "tp": res.tp, "fp": res.fp, "fn": res.fn,
        "ap_interp": args.ap_interp, "iou_thresh": args.iou_thresh, "frames": len(frames),
    }
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for c, ap in sorted(res.per_class_ap.items()):
        print(f"{ds.labels[c - 1]:>16s}  AP {ap:.4f}")
    print(f"mAP {res.mAP:.4f}  (small tier {small.mAP:.4f})")
    print(f"precision {res.precision:.4f} recall {res.recall:.4f} accuracy {res.accuracy:.4f}")
    return EXIT_OK


def cmd_streambench(args) -> int:
    specs = []
    for bag in args.bag:
        try:
            specs.append(read_bag(bag))
        except (StreamError, FileNotFoundError) as exc:
            raise CliError(f"bag {bag}: {exc}")
    if not args.oracle and not args.checkpoint:
        raise CliError("pass --checkpoint or --oracle")
    reports = []
    detector = None
    if args.checkpoint:
        model = _load_model(Path(args.checkpoint), args.config)
        md = ModelDetector(model, score_threshold=args.score_thresh)
        detector = lambda fr: md(fr.image)
        # throughput on the host, informative only
        frames = [fr.image for fr in specs[0].frames[: args.fps_frames]]
        t0 = time.perf_counter()
        for img in frames:
            md(img)
        dt = time.perf_counter() - t0
        print(f"throughput: {len(frames) / dt:.1f} frames/sec ({1000 * dt / len(frames):.1f} ms/frame, input {model.cfg.input_size})")
    for spec in specs:
        det = OracleDetector(spec.category) if args.oracle else detector
        rep = replay(spec, det, latency_ms=args.latency_ms, name=args.name or ("oracle" if args.oracle else "dunet"))
        reports.append(rep)
        print(
            f"{spec.label or spec.category}: processed {rep.frames_processed}/{rep.frames_total} "
            f"tp {rep.tp} fn {rep.fn} fp {rep.fp} recall {rep.recall:.3f} normalized-time {rep.normalized_time:.3f}"
        )
    paths = compare_runs(reports, args.out)
    print(f"report: {paths['csv']}")
    return EXIT_OK


def _parse_box(text: str) -> Box:
    try:
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise ValueError
        box = Box(*vals)
    except ValueError:
        raise CliError(f"--seed-box must be x0,y0,x1,y1 with x0<=x1, y0<=y1, got {text!r}")
    if not (0.0 <= box.xmin and box.xmax <= 1.0 and 0.0 <= box.ymin and box.ymax <= 1.0) or box.area <= 0:
        raise CliError(f"--seed-box {text!r} lies outside the frame")
    return box


def cmd_augment(args) -> int:
    box = _parse_box(args.seed_box)
    src = Path(args.source)
    if not src.is_dir():
        raise CliError(f"source directory not found: {src}")
    try:
        filters = load_filters(args.filters)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"filters: {exc}")
    if not filters:
        raise CliError("filter configuration lists no filters")
    try:
        res = build_dataset(frame_source(src), box, filters, args.out, seed=args.seed, min_gap_ms=args.min_gap_ms, label=args.label)
    except ValueError as exc:
        raise CliError(str(exc))
    for f in filters:
        print(f"{f.kind:>12s}: {res.counts.get(f.kind, 0)}")
    print(f"{len(res.samples)} samples from {res.frames_seen} frames -> {args.out}")
    if res.lost:
        print("warning: tracking lost; partial dataset written", file=sys.stderr)
    return EXIT_OK


def cmd_genshapes(args) -> int:
    if args.n < 1:
        raise CliError("-n must be at least 1")
    if args.size < 32:
        raise CliError("--size must be at least 32")
    ds = gen_shapes_dataset(args.n, args.size, args.out, seed=args.seed, size_range=(args.min_size, args.max_size))
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {len(ds.frames)} frames to {args.out} splits {sizes}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dunet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train from scratch")
    t.add_argument("--config", required=True)
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-class AP and mAP on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--config", help="model config JSON (default: model.json next to the checkpoint)")
    e.add_argument("--split", default="test")
    e.add_argument("--iou-thresh", type=float, default=0.5)
    e.add_argument("--score-thresh", type=float, default=0.01)
    e.add_argument("--ap-interp", choices=["all", "11point"], default="all")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("streambench", help="replay bag files against a detector")
    s.add_argument("--bag", action="append", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--oracle", action="store_true")
    s.add_argument("--config")
    s.add_argument("--latency-ms", type=float)
    s.add_argument("--score-thresh", type=float, default=0.5)
    s.add_argument("--name")
    s.add_argument("--fps-frames", type=int, default=50)
    s.add_argument("--out", default="streambench")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_streambench)

    a = sub.add_parser("augment", help="track a seed box and write filtered captures")
    a.add_argument("--source", required=True)
    a.add_argument("--seed-box", required=True, help="normalized x0,y0,x1,y1")
    a.add_argument("--filters", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--min-gap-ms", type=float, default=500.0)
    a.add_argument("--label", default="object")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_augment)

    gs = sub.add_parser("genshapes", help="write a synthetic shapes dataset")
    gs.add_argument("-n", type=int, required=True)
    gs.add_argument("--size", type=int, default=64)
    gs.add_argument("--out", required=True)
    gs.add_argument("--min-size", type=int, default=6)
    gs.add_argument("--max-size", type=int, default=24)
    gs.add_argument("--seed", type=int, default=0)
    gs.set_defaults(fn=cmd_genshapes)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
