"""Dense NCHW tensors with a small reverse-mode autodiff tape.

Only the op kinds DUNet needs are differentiable: conv2d, batchnorm, relu,
max/avg pooling, 2x nearest upsampling, channel concat, add, head flattening,
softmax cross-entropy and smooth-L1. ``mul``/``sum``/``scale`` exist for
building scalar objectives in tests and losses.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

OP_KINDS = (
    "leaf",
    "conv2d",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "upsample2",
    "concat",
    "add",
    "linear-heads",
    "softmax-ce",
    "smooth-l1",
    "mul",
    "sum",
    "scale",
)


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested on a graph that has not run forward."""


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float ndarray. Leaves created with
    ``requires_grad=True`` are parameters; their ``grad`` accumulates across
    backward calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        name: str = "",
    ):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data: np.ndarray, op: str, parents: Tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data, op=op)
    if _needs_grad(*parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = fn
    return out


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients live only for the duration of the call, so running
    backward twice on one graph doubles the leaf gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any parameter; nothing to differentiate")
    order = _topo_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ----------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, wc, kh, kw = w.shape
    if wc != c:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c}, weight C={wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel axes must be odd, got kh={kh}, kw={kw}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if b is not None and b.shape != (f,):
        raise DimensionError(f"conv2d bias axis mismatch: expected ({f},), got {b.shape}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d spatial axes H={h}, W={wd} too small for kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if kh == 1 and kw == 1:
        sub = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = sub.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def _bw(g: np.ndarray):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, "conv2d", parents, _bw)


# ----------------------------------------------------------------------------
# normalization / activations


class BNState:
    """Running statistics for one batchnorm layer (not trainable)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: Optional[BNState] = None,
    train: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In train mode batch statistics are used and ``state`` (if given) is
    updated as ``running = momentum * running + (1 - momentum) * batch``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.data.ndim < 2:
        raise DimensionError(f"batchnorm expects at least 2-D input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batchnorm channel axis C={c} does not match scale {scale.shape} / shift {shift.shape}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    if train:
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if state is not None:
            m = x.data.size // c
            unbiased = var * m / (m - 1) if m > 1 else var
            state.mean = momentum * state.mean + (1.0 - momentum) * mean
            state.var = momentum * state.var + (1.0 - momentum) * unbiased
    else:
        if state is None:
            raise GraphStateError("inference-mode batchnorm needs running statistics")
        mean, var = state.mean, state.var
        xc = x.data - mean.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def _bw(g: np.ndarray):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data.reshape(bshape)
            if train:
                m = x.data.size // c
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes).reshape(bshape)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift

    return _make(out, "batchnorm", (x, scale, shift), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# pooling / resampling


def _check_pool(x: Tensor, k: int, stride: int) -> Tuple[int, int]:
    if x.data.ndim != 4:
        raise DimensionError(f"pool expects 4-D input, got {x.shape}")
    if k < 1 or stride < 1:
        raise DimensionError(f"pool needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    h, w = x.shape[2:]
    if h < k or w < k:
        raise DimensionError(f"pool window {k} larger than spatial axes H={h}, W={w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def pool(x: Tensor, kind: str = "max", k: int = 2, stride: int = 2) -> Tensor:
    if kind == "max":
        return maxpool(x, k, stride)
    if kind == "avg":
        return avgpool(x, k, stride)
    raise ValueError(f"unknown pool kind {kind!r}")


def maxpool(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    ho, wo = _check_pool(x, k, stride)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)  # first index wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g: np.ndarray):
        gx = np.zeros_like(x.data)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == idx)
        return (gx,)

    return _make(np.ascontiguousarray(out), "maxpool", (x,), _bw)


def avgpool(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    ho, wo = _check_pool(x, k, stride)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(-2, -1))

    def _bw(g: np.ndarray):
        gx = np.zeros_like(x.data)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        return (gx,)

    return _make(out, "avgpool", (x,), _bw)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2 expects 4-D input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _bw(g: np.ndarray):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2", (x,), _bw)


# ----------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def _bw(g: np.ndarray):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(out, "concat", tuple(tensors), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def flatten_heads(heads: Sequence[Tensor], per_anchor: int) -> Tensor:
    """Lay out head maps ``[N, A*D, g, g]`` as ``[N, sum(g*g*A), D]``.

    Order is head-major, then row-major cell, then anchor index, matching
    the anchor generator.
    """
    parts = []
    for h in heads:
        n, ch, gh, gw = h.shape
        if ch % per_anchor:
            raise DimensionError(f"head channels {ch} not divisible by per-anchor width {per_anchor}")
        parts.append(h.data.transpose(0, 2, 3, 1).reshape(n, gh * gw * (ch // per_anchor), per_anchor))
    out = np.concatenate(parts, axis=1)
    counts = [p.shape[1] for p in parts]

    def _bw(g: np.ndarray):
        grads = []
        lo = 0
        for h, cnt in zip(heads, counts):
            n, ch, gh, gw = h.shape
            grads.append(g[:, lo : lo + cnt].reshape(n, gh, gw, ch).transpose(0, 3, 1, 2))
            lo += cnt
        return grads

    return _make(out, "linear-heads", tuple(heads), _bw)


# ----------------------------------------------------------------------------
# losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_ce(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of softmax cross-entropy over the last axis.

    ``targets`` holds integer class ids and ``weights`` per-row multipliers
    (0 excludes a row); both have the shape of ``logits`` minus its last axis.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=DTYPE)
    if targets.shape != logits.shape[:-1] or weights.shape != targets.shape:
        raise DimensionError(
            f"softmax_ce: logits {logits.shape} vs targets {targets.shape} / weights {weights.shape}"
        )
    lsm = log_softmax(logits.data)
    picked = np.take_along_axis(lsm, targets[..., None].astype(np.intp), axis=-1)[..., 0]
    out = np.asarray(-(picked * weights).sum())

    def _bw(g: np.ndarray):
        p = np.exp(lsm)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None].astype(np.intp), 1.0, axis=-1)
        return ((p - onehot) * (weights[..., None] * g),)

    return _make(out, "softmax-ce", (logits,), _bw)


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of Huber(beta=1) residuals over rows where ``mask`` is set."""
    target = np.asarray(target, dtype=DTYPE)
    mask = np.asarray(mask, dtype=DTYPE)
    if target.shape != pred.shape or mask.shape != pred.shape[:-1]:
        raise DimensionError(f"smooth_l1: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    d = pred.data - target
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    out = np.asarray((per * mask[..., None]).sum())

    def _bw(g: np.ndarray):
        return (np.where(ad < 1.0, d, np.sign(d)) * (mask[..., None] * g),)

    return _make(out, "smooth-l1", (pred,), _bw)


# ----------------------------------------------------------------------------
# checkpoint io

_MAGIC = b"DUNETCK1"
_VERSION = 1


def save_checkpoint(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float64 with a versioned header."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 16
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(blob):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(dims).astype(DTYPE)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out
