"""Random finite-difference cases, one builder per differentiable op kind.

Each builder takes a Generator and returns ``(inputs, objective)`` where
``inputs`` are float arrays and ``objective(*tensors)`` builds a scalar.
Inputs are kept away from kinks (relu at 0, smooth-l1 at |d| = 1, max-pool
ties) so central differences are well defined.
"""

from __future__ import annotations

import numpy as np

from dunet import tensor as T
from oracles import central_difference, max_rel_error

H = 1e-4
TOL = 1e-4


def _weighted(out, rng):
    r = T.Tensor(rng.normal(size=out.shape))
    return T.tsum(T.mul(out, r))


def _away_from_zero(rng, shape, gap=0.01):
    u = rng.normal(size=shape)
    return np.sign(u) * (gap + np.abs(u))


def case_conv2d(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    n, c, f = (int(v) for v in rng.integers(1, 4, size=3))
    h, w = (int(v) for v in rng.integers(k, 8, size=2))
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(f, c, k, k))
    b = rng.normal(size=f)
    seed = int(rng.integers(1 << 30))
    return [x, wt, b], lambda x, wt, b: _weighted(T.conv2d(x, wt, b, stride, pad), np.random.default_rng(seed))


def case_batchnorm(rng):
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 5, size=2))
    x = rng.normal(size=(n, c, h, w)) * 2 + 0.5
    g = rng.normal(size=c)
    b = rng.normal(size=c)
    train = bool(rng.integers(0, 2))
    state = T.BNState(c)
    state.mean = rng.normal(size=c)
    state.var = rng.uniform(0.5, 2.0, size=c)
    seed = int(rng.integers(1 << 30))

    def obj(x, g, b):
        st = T.BNState(c)
        st.mean, st.var = state.mean.copy(), state.var.copy()
        return _weighted(T.batchnorm(x, g, b, st, train=train), np.random.default_rng(seed))

    return [x, g, b], obj


def case_relu(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
    seed = int(rng.integers(1 << 30))
    return [_away_from_zero(rng, shape)], lambda x: _weighted(T.relu(x), np.random.default_rng(seed))


def _distinct(rng, shape):
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.01 + rng.uniform(0, 0.001, size)).reshape(shape)


def case_maxpool(rng):
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    n, c = (int(v) for v in rng.integers(1, 3, size=2))
    h, w = (int(v) for v in rng.integers(k, 8, size=2))
    seed = int(rng.integers(1 << 30))
    return [_distinct(rng, (n, c, h, w))], lambda x: _weighted(T.maxpool(x, k, stride), np.random.default_rng(seed))


def case_avgpool(rng):
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    n, c = (int(v) for v in rng.integers(1, 3, size=2))
    h, w = (int(v) for v in rng.integers(k, 8, size=2))
    seed = int(rng.integers(1 << 30))
    x = rng.normal(size=(n, c, h, w))
    return [x], lambda x: _weighted(T.avgpool(x, k, stride), np.random.default_rng(seed))


def case_upsample2(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    seed = int(rng.integers(1 << 30))
    return [rng.normal(size=shape)], lambda x: _weighted(T.upsample2(x), np.random.default_rng(seed))


def case_concat(rng):
    n, h, w = (int(v) for v in rng.integers(1, 4, size=3))
    parts = [rng.normal(size=(n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(2, 4)))]
    seed = int(rng.integers(1 << 30))
    return parts, lambda *ts: _weighted(T.concat(ts, axis=1), np.random.default_rng(seed))


def case_add(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    seed = int(rng.integers(1 << 30))
    return [rng.normal(size=shape), rng.normal(size=shape)], lambda a, b: _weighted(
        T.add(a, b), np.random.default_rng(seed)
    )


def case_mul(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    return [rng.normal(size=shape), rng.normal(size=shape)], lambda a, b: T.tsum(T.mul(a, b))


def case_sum(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    return [rng.normal(size=shape)], lambda a: T.scale(T.tsum(a), 1.7)


def case_scale(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    c = float(rng.normal())
    seed = int(rng.integers(1 << 30))
    return [rng.normal(size=shape)], lambda a: _weighted(T.scale(a, c), np.random.default_rng(seed))


def case_linear_heads(rng):
    n = int(rng.integers(1, 3))
    d = int(rng.integers(1, 4))
    heads = []
    for g in (4, 2, 1)[: int(rng.integers(2, 4))]:
        a = int(rng.integers(1, 3))
        heads.append(rng.normal(size=(n, a * d, g, g)))
    seed = int(rng.integers(1 << 30))
    return heads, lambda *ts: _weighted(T.flatten_heads(ts, d), np.random.default_rng(seed))


def case_softmax_ce(rng):
    n, m, k = int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
    targets = rng.integers(0, k, size=(n, m))
    weights = rng.integers(0, 2, size=(n, m)).astype(float)
    weights[0, 0] = 1.0
    return [rng.normal(size=(n, m, k)) * 2], lambda z: T.softmax_ce(z, targets, weights)


def case_smooth_l1(rng):
    n, m = int(rng.integers(1, 3)), int(rng.integers(1, 6))
    target = rng.normal(size=(n, m, 4))
    d = rng.uniform(-2.5, 2.5, size=target.shape)
    d = np.where(np.abs(np.abs(d) - 1.0) < 0.01, d * 1.05, d)
    mask = rng.integers(0, 2, size=(n, m)).astype(float)
    mask[0, 0] = 1.0
    return [target + d], lambda p: T.smooth_l1(p, target, mask)


CASES = {
    "conv2d": case_conv2d,
    "batchnorm": case_batchnorm,
    "relu": case_relu,
    "maxpool": case_maxpool,
    "avgpool": case_avgpool,
    "upsample2": case_upsample2,
    "concat": case_concat,
    "add": case_add,
    "linear-heads": case_linear_heads,
    "softmax-ce": case_softmax_ce,
    "smooth-l1": case_smooth_l1,
    "mul": case_mul,
    "sum": case_sum,
    "scale": case_scale,
}


def gradcheck(builder, seed, max_coords=12):
    """Max relative error between backward and central differences for one random case."""
    rng = np.random.default_rng(seed)
    arrays, objective = builder(rng)
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = objective(*leaves)
    T.backward(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        size = arr.size
        coords = rng.choice(size, size=min(size, max_coords), replace=False)

        def fn():
            fresh = [T.Tensor(a) for a in arrays]
            return float(objective(*fresh).data)

        numeric = central_difference(fn, arr, coords, H)
        analytic = leaf.grad.reshape(-1)[coords]
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
