"""Wrap a trained model as an image -> detections callable."""

from __future__ import annotations

from dataclasses import replace
from typing import List, Sequence

import numpy as np

from .dataset import letterbox, to_input, unletterbox_box
from .geometry import Detection, anchor_array, decode_detections
from .model import DUNet


class ModelDetector:
    def __init__(
        self,
        model: DUNet,
        score_threshold: float = 0.01,
        iou_threshold: float = 0.45,
        max_out: int = 200,
        batch_size: int = 32,
    ):
        self.model = model
        self.anchors = anchor_array(model.cfg)
        self.score_threshold = score_threshold
        self.iou_threshold = iou_threshold
        self.max_out = max_out
        self.batch_size = batch_size

    def __call__(self, image: np.ndarray) -> List[Detection]:
        return self.detect_batch([image])[0]

    def detect_batch(self, images: Sequence[np.ndarray]) -> List[List[Detection]]:
        size = self.model.cfg.input_size
        k = self.model.cfg.num_classes
        results: List[List[Detection]] = []
        for lo in range(0, len(images), self.batch_size):
            chunk = images[lo : lo + self.batch_size]
            boxed = [letterbox(img, size) for img in chunk]
            x = np.stack([to_input(b[0]) for b in boxed])
            heads = self.model.forward(x, train=False)
            self.model._forward_done = False
            for i, (img, (_, s, px, py)) in enumerate(zip(chunk, boxed)):
                per_head = [(c.data[i : i + 1], b.data[i : i + 1]) for c, b in heads]
                dets = decode_detections(
                    per_head, self.anchors, k, self.score_threshold, self.iou_threshold, self.max_out
                )
                h, w = img.shape[:2]
                if (h, w) != (size, size):
                    dets = [replace(d, box=unletterbox_box(d.box, w, h, size, s, px, py)) for d in dets]
                results.append(dets)
        return results
