"""SGD with momentum and the from-scratch training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dataset import AnnotatedDataset, FrameRecord, letterbox, letterbox_boxes, to_input
from .geometry import anchor_array
from .loss import build_targets, multibox_loss
from .model import DUNet

logger = logging.getLogger(__name__)

LOSS_HEADER = ["step", "total_loss", "conf_loss", "loc_loss"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite: Optional[float]):
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"loss became non-finite at step {step}; last finite loss was {last_finite}")


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.05)])
    weight_decay: float = 5e-4
    momentum: float = 0.9
    neg_pos_ratio: float = 3.0
    loc_weight: float = 1.0
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    hflip: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_schedule or any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.neg_pos_ratio <= 0:
            raise ValueError("neg_pos_ratio must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def rate_at(self, step: int) -> float:
        rate = self.lr_schedule[0][1]
        for start, r in sorted(self.lr_schedule):
            if step >= start:
                rate = r
        return rate

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = [(int(s), float(r)) for s, r in d["lr_schedule"]]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """``v <- mu*v + g + wd*w``; ``w <- w - lr*v``."""

    def __init__(self, params: Sequence[T.Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self, rate: float) -> None:
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity.get(id(p))
            upd = g + self.weight_decay * p.data
            v = upd if v is None else self.momentum * v + upd
            self.velocity[id(p)] = v
            p.data = p.data - rate * v


def sgd_step(params, grads, rate: float, weight_decay: float = 0.0, momentum: float = 0.9, velocity=None):
    """Functional form over plain arrays; returns ``(new_params, new_velocity)``."""
    velocity = [np.zeros_like(np.asarray(p, dtype=float)) for p in params] if velocity is None else velocity
    new_p, new_v = [], []
    for w, g, v in zip(params, grads, velocity):
        w = np.asarray(w, dtype=float)
        v = momentum * np.asarray(v) + np.asarray(g, dtype=float) + weight_decay * w
        new_v.append(v)
        new_p.append(w - rate * v)
    return new_p, new_v


@contextmanager
def thread_limit():
    """Cap BLAS threads at ``$DUNET_THREADS`` when set."""
    n = os.environ.get("DUNET_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


@dataclass
class SampleSet:
    images: np.ndarray  # [N, 3, S, S]
    gt_boxes: List[np.ndarray]
    gt_classes: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)


def prepare_samples(ds: AnnotatedDataset, frames: Sequence[FrameRecord], input_size: int) -> SampleSet:
    imgs, boxes, classes = [], [], []
    for f in frames:
        canvas, s, px, py = letterbox(ds.image(f), input_size)
        b, c = f.gt_arrays()
        imgs.append(to_input(canvas))
        boxes.append(letterbox_boxes(b, f.width, f.height, input_size, s, px, py))
        classes.append(c)
    images = np.stack(imgs) if imgs else np.zeros((0, 3, input_size, input_size))
    return SampleSet(images, boxes, classes)


def samples_from_arrays(items, input_size: int) -> SampleSet:
    """Build a SampleSet from in-memory ``(uint8 image, [(cls, Box)])`` pairs."""
    imgs, boxes, classes = [], [], []
    for img, bx in items:
        h, w = img.shape[:2]
        canvas, s, px, py = letterbox(img, input_size)
        b = np.array([x.as_tuple() for _, x in bx], dtype=float).reshape(-1, 4)
        imgs.append(to_input(canvas))
        boxes.append(letterbox_boxes(b, w, h, input_size, s, px, py))
        classes.append(np.array([c for c, _ in bx], dtype=np.int64))
    return SampleSet(np.stack(imgs), boxes, classes)


@dataclass
class TrainResult:
    losses: List[Tuple[int, float, float, float]]
    checkpoint: Optional[Path]


def _targets(samples: SampleSet, anchors: np.ndarray, flipped: bool) -> Tuple[np.ndarray, np.ndarray]:
    n, m = len(samples), len(anchors)
    labels = np.zeros((n, m), dtype=np.int64)
    targets = np.zeros((n, m, 4))
    for i, (b, c) in enumerate(zip(samples.gt_boxes, samples.gt_classes)):
        if flipped and len(b):
            b = b.copy()
            b[:, [0, 2]] = 1.0 - b[:, [2, 0]]
        labels[i], targets[i] = build_targets(anchors, b, c)
    return labels, targets


def train(
    model: DUNet,
    data,
    cfg: TrainConfig,
    out_dir=None,
    log_every: int = 50,
) -> TrainResult:
    """Minibatch SGD from the model's current (random) initialisation.

    ``data`` is an AnnotatedDataset (its train split is used) or a SampleSet.
    Writes ``loss.csv`` and ``checkpoint.bin`` to ``out_dir`` when given.
    """
    cfg.validate()
    if isinstance(data, AnnotatedDataset):
        data = prepare_samples(data, data.split("train"), model.cfg.input_size)
    if len(data) == 0:
        raise ValueError("training set is empty")
    anchors = anchor_array(model.cfg)
    labels, targets = _targets(data, anchors, flipped=False)
    if cfg.hflip:
        flabels, ftargets = _targets(data, anchors, flipped=True)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    k = model.cfg.num_classes + 1
    losses: List[Tuple[int, float, float, float]] = []
    last_finite: Optional[float] = None
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    ckpt = out / "checkpoint.bin" if out is not None else None
    with thread_limit():
        for step in range(cfg.max_steps):
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(data))
                if len(order) < cfg.batch_size:
                    order = np.resize(order, cfg.batch_size)
                cursor = 0
            idx = order[cursor : cursor + cfg.batch_size]
            cursor += cfg.batch_size
            x = data.images[idx]
            lab, tgt = labels[idx], targets[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                if flip.any():
                    x = x.copy()
                    x[flip] = x[flip][..., ::-1]
                    lab = np.where(flip[:, None], flabels[idx], lab)
                    tgt = np.where(flip[:, None, None], ftargets[idx], tgt)
            heads = model.forward(x, train=True)
            cls = T.flatten_heads([c for c, _ in heads], k)
            box = T.flatten_heads([b for _, b in heads], 4)
            parts = multibox_loss(cls, box, lab, tgt, cfg.neg_pos_ratio, cfg.loc_weight)
            total = float(parts.total.data)
            if not math.isfinite(total):
                raise TrainingDiverged(step, last_finite)
            last_finite = total
            model.zero_grad()
            model.backward(parts.total)
            opt.step(cfg.rate_at(step))
            losses.append((step, total, parts.conf, parts.loc))
            if log_every and step % log_every == 0:
                logger.info("step %d loss %.4f (conf %.4f loc %.4f)", step, total, parts.conf, parts.loc)
            if ckpt is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                model.save(ckpt)
    if out is not None:
        model.save(ckpt)
        write_loss_csv(out / "loss.csv", losses)
    return TrainResult(losses, ckpt)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for step, total, conf, loc in losses:
            w.writerow([step, repr(total), repr(conf), repr(loc)])
