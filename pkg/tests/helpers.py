"""Oracles and checker matrices shared between unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from histopatch import ops
from histopatch.autodiff import Tape
from histopatch.geometry import LayerGeom
from histopatch.tensor import Tensor


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
                 padding: int) -> np.ndarray:
    """Direct-summation convolution oracle in float64."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.empty((n, cout, oh, ow), dtype=np.float64)
    w64 = w.astype(np.float64)
    for ni in range(n):
        for o in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    window = xp[ni, :, y * stride:y * stride + kh,
                                xx * stride:xx * stride + kw]
                    out[ni, o, y, xx] = np.sum(window * w64[o]) + b[o]
    return out


def random_conv_case(rng: np.random.Generator):
    """One random conv shape within the oracle's domain (up to 2x4x16x16)."""
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 5))
    cout = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 4))
    padding = int(rng.integers(0, 3))
    kh = int(rng.integers(1, 5))
    h = int(rng.integers(max(1, kh - 2 * padding), 17))
    wd = int(rng.integers(max(1, kh - 2 * padding), 17))
    x = rng.uniform(-1, 1, size=(n, cin, h, wd)).astype(np.float32)
    w = rng.uniform(-1, 1, size=(cout, cin, kh, kh)).astype(np.float32)
    b = rng.uniform(-1, 1, size=(cout,)).astype(np.float32)
    return x, w, b, stride, padding


def gradcheck_cases() -> list[tuple[str, callable, list[tuple[int, ...]]]]:
    """(name, op(*tensors, tape=...), input shapes) for every differentiable
    primitive, at the smallest nontrivial shapes."""

    def conv_s2p1(x, w, b, tape=None):
        return ops.conv2d(x, w, b, stride=2, padding=1, tape=tape)

    def conv_s1p0(x, w, b, tape=None):
        return ops.conv2d(x, w, b, stride=1, padding=0, tape=tape)

    def bn_train(x, g, b, tape=None):
        return ops.batchnorm2d(x, g, b, Tensor(np.zeros(3, np.float32)),
                               Tensor(np.ones(3, np.float32)), "train", tape=tape)

    def bn_eval(x, g, b, tape=None):
        return ops.batchnorm2d(x, g, b, Tensor(np.full(3, 0.2, np.float32)),
                               Tensor(np.full(3, 0.8, np.float32)), "eval", tape=tape)

    def ce(x, tape=None):
        return ops.cross_entropy(x, np.asarray([0, 1, 2, 3, 1]), tape=tape)

    def drop(x, tape=None):
        return ops.dropout(x, 0.4, "train", rng=np.random.default_rng(99), tape=tape)

    def cat(a, b, c, tape=None):
        return ops.concat_channels([a, b, c], tape=tape)

    return [
        ("conv2d stride 2 pad 1", conv_s2p1, [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
        ("conv2d stride 1 pad 0", conv_s1p0, [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        ("linear", lambda x, w, b, tape=None: ops.linear(x, w, b, tape=tape),
         [(5, 7), (3, 7), (3,)]),
        ("batchnorm train", bn_train, [(4, 3, 5, 5), (3,), (3,)]),
        ("batchnorm eval", bn_eval, [(4, 3, 5, 5), (3,), (3,)]),
        ("relu", lambda x, tape=None: ops.relu(x, tape=tape), [(2, 3, 5, 5)]),
        ("softmax", lambda x, tape=None: ops.softmax(x, tape=tape), [(4, 6)]),
        ("cross_entropy", ce, [(5, 4)]),
        ("dropout train", drop, [(3, 4, 5, 5)]),
        ("global_avg_pool", lambda x, tape=None: ops.global_avg_pool(x, tape=tape),
         [(2, 3, 5, 5)]),
        ("concat_channels", cat, [(2, 4, 4), (3, 4, 4), (1, 4, 4)]),
    ]


def random_small_stack(rng: np.random.Generator,
                       max_r: int = 28) -> list[LayerGeom]:
    """Random 1..3-layer unpadded conv stack with a modest receptive field."""
    while True:
        depth = int(rng.integers(1, 4))
        geoms = [LayerGeom(kernel=int(rng.integers(1, 5)),
                           stride=int(rng.integers(1, 4)), padding=0)
                 for _ in range(depth)]
        r, jump = 1, 1
        for g in geoms:
            r += (g.kernel - 1) * jump
            jump *= g.stride
        if r <= max_r:
            return geoms


def gradient_support(geoms: list[LayerGeom], out_x: int,
                     input_size: int) -> tuple[int, int]:
    """(first, last) input column influencing output unit (0, out_x), found
    by back-propagating a one-hot seed through an all-ones conv stack."""
    tape = Tape()
    x = Tensor(np.ones((1, 1, input_size, input_size), np.float32),
               requires_grad=True)
    cur = x
    for g in geoms:
        w = Tensor(np.ones((1, 1, g.kernel, g.kernel), np.float32),
                   requires_grad=True)
        b = Tensor(np.zeros(1, np.float32), requires_grad=True)
        cur = ops.conv2d(cur, w, b, stride=g.stride, padding=g.padding, tape=tape)
    seed = np.zeros(cur.shape, dtype=np.float32)
    seed[0, 0, 0, out_x] = 1.0
    tape.backward(cur, seed=seed)
    cols = np.nonzero(np.abs(x.grad).sum(axis=(0, 1, 2)) > 0)[0]
    return int(cols[0]), int(cols[-1])
