"""DUNet: dense bottom-up blocks, a top-down 2x upscaling pathway with lateral
summation, and four multibox prediction heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import BNState, DimensionError, GraphStateError, Tensor


class ConfigError(ValueError):
    """Raised when a DUNetConfig violates its invariants."""


@dataclass
class DUNetConfig:
    input_size: int = 320
    stem_filters: int = 64
    block_layers: List[int] = field(default_factory=lambda: [5, 7, 7, 7])
    growth_rate: int = 32
    bottleneck_filters: int = 64
    lateral_channels: int = 128
    anchors_per_cell: int = 4
    num_classes: int = 10
    head_count: int = 4

    def validate(self) -> None:
        problems = []
        if self.input_size <= 0 or self.input_size % 32:
            problems.append(f"input_size {self.input_size} must be a positive multiple of 32")
        if len(self.block_layers) != 4:
            problems.append(f"block_layers must have 4 entries, got {len(self.block_layers)}")
        if any(n < 1 for n in self.block_layers):
            problems.append(f"block_layers entries must be >= 1, got {self.block_layers}")
        if self.growth_rate < 1:
            problems.append(f"growth_rate must be >= 1, got {self.growth_rate}")
        for name in ("stem_filters", "bottleneck_filters", "lateral_channels", "anchors_per_cell", "num_classes"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_count != 4:
            problems.append(f"head_count is fixed at 4, got {self.head_count}")
        if problems:
            raise ConfigError("invalid DUNetConfig: " + "; ".join(problems))

    @property
    def grid_sizes(self) -> List[int]:
        return [self.input_size // s for s in (4, 8, 16, 32)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "DUNetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DUNetConfig fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.block_layers = list(cfg.block_layers)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "DUNetConfig":
        return cls.from_dict(json.loads(text))


def paper_config(num_classes: int = 10) -> DUNetConfig:
    return DUNetConfig(num_classes=num_classes)


def desk_config(num_classes: int = 3) -> DUNetConfig:
    return DUNetConfig(
        input_size=64,
        stem_filters=16,
        block_layers=[2, 3, 3, 3],
        growth_rate=8,
        bottleneck_filters=32,
        lateral_channels=32,
        num_classes=num_classes,
    )


# ----------------------------------------------------------------------------
# layers


class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1):
        bound = np.sqrt(6.0 / (cin * k * k))
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def params(self) -> List[Tensor]:
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, name: str, channels: int):
        self.scale = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.scale")
        self.shift = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.shift")
        self.state = BNState(channels)
        self.name = name

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm(x, self.scale, self.shift, self.state, train=train)

    def params(self) -> List[Tensor]:
        return [self.scale, self.shift]


class DenseLayer:
    """BN -> ReLU -> 1x1 bottleneck -> BN -> ReLU -> 3x3 conv producing ``growth`` maps."""

    def __init__(self, name: str, cin: int, growth: int, bottleneck: int, rng: np.random.Generator):
        self.bn1 = BatchNorm(f"{name}.bn1", cin)
        self.conv1 = Conv(f"{name}.conv1", cin, bottleneck, 1, rng)
        self.bn2 = BatchNorm(f"{name}.bn2", bottleneck)
        self.conv2 = Conv(f"{name}.conv2", bottleneck, growth, 3, rng)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.conv1(T.relu(self.bn1(x, train)))
        return self.conv2(T.relu(self.bn2(h, train)))

    def layers(self):
        return [self.bn1, self.conv1, self.bn2, self.conv2]


class DenseBlock:
    def __init__(self, name: str, cin: int, n_layers: int, growth: int, bottleneck: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ConfigError(f"dense block needs at least one layer, got {n_layers}")
        self.in_channels = cin
        self.out_channels = cin + n_layers * growth
        self.layers = [
            DenseLayer(f"{name}.layer{i}", cin + i * growth, growth, bottleneck, rng) for i in range(n_layers)
        ]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else T.concat(feats)
            feats.append(layer(inp, train))
        return T.concat(feats)

    def modules(self):
        return [m for layer in self.layers for m in layer.layers()]


def dense_block(
    in_channels: int, n_layers: int, growth: int, bottleneck: int, seed: int = 0, name: str = "block"
) -> DenseBlock:
    return DenseBlock(name, in_channels, n_layers, growth, bottleneck, np.random.default_rng(seed))


class Head:
    """Shared BN/ReLU followed by parallel 3x3 class and box convolutions."""

    def __init__(self, name: str, cin: int, anchors: int, num_classes: int, rng: np.random.Generator):
        self.bn = BatchNorm(f"{name}.bn", cin)
        self.cls = Conv(f"{name}.cls", cin, anchors * (num_classes + 1), 3, rng)
        self.box = Conv(f"{name}.box", cin, anchors * 4, 3, rng)

    def __call__(self, x: Tensor, train: bool) -> Tuple[Tensor, Tensor]:
        h = T.relu(self.bn(x, train))
        return self.cls(h), self.box(h)


class DUNet:
    """The trainable model graph.

    ``forward`` records a fresh tape each call; ``backward`` differentiates
    the last recorded loss into the parameters' ``grad`` fields.
    """

    def __init__(self, cfg: DUNetConfig, seed: int = 0, top_down: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.top_down = top_down
        rng = np.random.default_rng(seed)
        self.stem_conv = Conv("stem.conv", 3, cfg.stem_filters, 3, rng, stride=2)
        self.stem_bn = BatchNorm("stem.bn", cfg.stem_filters)
        self.blocks: List[DenseBlock] = []
        ch = cfg.stem_filters
        for i, n in enumerate(cfg.block_layers):
            blk = DenseBlock(f"block{i + 1}", ch, n, cfg.growth_rate, cfg.bottleneck_filters, rng)
            self.blocks.append(blk)
            ch = blk.out_channels
        self.lateral_bns = [BatchNorm(f"lateral{i + 1}.bn", b.out_channels) for i, b in enumerate(self.blocks)]
        self.laterals = [
            Conv(f"lateral{i + 1}.conv", b.out_channels, cfg.lateral_channels, 1, rng) for i, b in enumerate(self.blocks)
        ]
        self.heads = [
            Head(f"head{i + 1}", cfg.lateral_channels, cfg.anchors_per_cell, cfg.num_classes, rng) for i in range(4)
        ]
        self._forward_done = False
        self.last_pyramid: List[Tensor] = []
        self.last_block_outputs: List[Tensor] = []

    # -- parameter bookkeeping -------------------------------------------------

    def _modules(self):
        mods = [self.stem_conv, self.stem_bn]
        for b in self.blocks:
            mods.extend(b.modules())
        mods.extend(self.lateral_bns)
        mods.extend(self.laterals)
        for h in self.heads:
            mods.extend([h.bn, h.cls, h.box])
        return mods

    def parameters(self) -> List[Tensor]:
        return [p for m in self._modules() for p in m.params()]

    def named_parameters(self) -> Dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def batchnorms(self) -> List[BatchNorm]:
        return [m for m in self._modules() if isinstance(m, BatchNorm)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for bn in self.batchnorms():
            out[f"{bn.name}.running_mean"] = bn.state.mean.copy()
            out[f"{bn.name}.running_var"] = bn.state.var.copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise DimensionError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            if arr.shape != expected[name].shape:
                raise DimensionError(f"checkpoint tensor {name!r} has shape {arr.shape}, model expects {expected[name].shape}")
        params = self.named_parameters()
        for bn in self.batchnorms():
            bn.state.mean = np.array(state[f"{bn.name}.running_mean"], dtype=T.DTYPE)
            bn.state.var = np.array(state[f"{bn.name}.running_var"], dtype=T.DTYPE)
        for name, p in params.items():
            p.data = np.array(state[name], dtype=T.DTYPE)

    def save(self, path) -> None:
        T.save_checkpoint(path, self.state_dict())

    # -- execution -------------------------------------------------------------

    def forward(self, x, train: bool = True) -> List[Tuple[Tensor, Tensor]]:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        s = self.cfg.input_size
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise DimensionError(f"expected input [N,3,{s},{s}], got {x.shape}")
        h = T.avgpool(T.relu(self.stem_bn(self.stem_conv(x), train)), 2, 2)
        outs = []
        for i, blk in enumerate(self.blocks):
            if i:
                h = T.maxpool(h, 2, 2)
            h = blk(h, train)
            outs.append(h)
        lats = [conv(bn(o, train)) for o, bn, conv in zip(outs, self.lateral_bns, self.laterals)]
        pyramid: List[Optional[Tensor]] = [None] * 4
        pyramid[3] = lats[3]
        for i in (2, 1, 0):
            pyramid[i] = T.add(lats[i], T.upsample2(pyramid[i + 1])) if self.top_down else lats[i]
        self.last_block_outputs = outs
        self.last_pyramid = pyramid
        self._forward_done = True
        return [head(p, train) for head, p in zip(self.heads, pyramid)]

    def backward(self, loss: Tensor) -> None:
        if not self._forward_done:
            raise GraphStateError("backward called before forward")
        T.backward(loss)
        self._forward_done = False


ModelGraph = DUNet


def build_dunet(cfg: DUNetConfig, seed: int = 0, top_down: bool = True) -> DUNet:
    return DUNet(cfg, seed=seed, top_down=top_down)


def load_model(path, cfg: DUNetConfig, top_down: bool = True) -> DUNet:
    model = DUNet(cfg, top_down=top_down)
    model.load_state_dict(T.load_checkpoint(path))
    return model


def forward_detect(model: DUNet, image) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Inference-mode forward; returns (scores, offsets) arrays per head."""
    outs = model.forward(image, train=False)
    model._forward_done = False
    return [(c.data, b.data) for c, b in outs]


def count_parameters(model: DUNet) -> int:
    return int(sum(p.data.size for p in model.parameters()))
