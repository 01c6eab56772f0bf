"""Forward and backward implementations of every layer primitive.

All functions take `Tensor` arguments, compute in float32 and, when a `Tape`
is supplied, record a backward rule on it.  Convolution uses an
im2col/matmul formulation; its correctness is pinned against a naive
direct-summation oracle in the test suite.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tape
from .tensor import Tensor

__all__ = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "linear",
    "dropout",
    "softmax",
    "cross_entropy",
    "global_avg_pool",
    "concat_channels",
]


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, L) patch matrix, L = H2*W2."""
    n, c, hp, wp = xp.shape
    h2 = (hp - kh) // stride + 1
    w2 = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, h2, w2),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, h2 * w2)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int) -> np.ndarray:
    """Scatter-add (N, C*kh*kw, L) columns back onto an (N, C, Hp, Wp) image."""
    n, c, hp, wp = shape
    h2 = (hp - kh) // stride + 1
    w2 = (wp - kw) // stride + 1
    out = np.zeros(shape, dtype=np.float32)
    g6 = cols.reshape(n, c, kh, kw, h2, w2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h2:stride, j:j + stride * w2:stride] += g6[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0,
           tape: Tape | None = None) -> Tensor:
    """2D cross-correlation (no kernel flip) with zero padding.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,).
    Output spatial size is floor((H + 2*padding - kh)/stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels "
            f"but weight shape {w.shape} expects {cin_w}"
        )
    if b.shape != (cout,):
        raise ValueError(f"conv2d bias shape {b.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    if padding > 0:
        xp = np.zeros((n, cin, hp, wp), dtype=np.float32)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    h2 = (hp - kh) // stride + 1
    w2 = (wp - kw) // stride + 1

    cols = _im2col(xp, kh, kw, stride)                      # (N, CKK, L)
    wmat = w.data.reshape(cout, -1)                         # (Cout, CKK)
    y = np.matmul(wmat, cols)                               # (N, Cout, L)
    y += b.data[:, None]
    out = Tensor(y.reshape(n, cout, h2, w2))

    if tape is not None:
        def backward(gout: np.ndarray):
            go = gout.reshape(n, cout, h2 * w2)
            gb = gout.sum(axis=(0, 2, 3))
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            gcols = np.matmul(wmat.T, go)                   # (N, CKK, L)
            gxp = _col2im(gcols, (n, cin, hp, wp), kh, kw, stride)
            if padding > 0:
                gx = np.ascontiguousarray(
                    gxp[:, :, padding:padding + h, padding:padding + wd])
            else:
                gx = gxp
            return gx, gw, gb

        tape.record((x, w, b), out, backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                running_var: Tensor, mode: str, momentum: float = 0.1,
                eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place: running <- (1-momentum)*running + momentum*batch.
    Eval mode normalizes with the running buffers only.
    """
    _check_mode(mode)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects (N, C, H, W), got {x.shape}")
    n, c, h, wd = x.shape
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ValueError(f"batchnorm2d {name} shape {t.shape} != ({c},)")

    if mode == "train":
        m = n * h * wd
        if m < 2:
            raise ValueError(
                f"batchnorm2d train mode needs N*H*W >= 2 for a defined variance, got {m}"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + np.float32(eps))
        xhat = centered * invstd[None, :, None, None]
        running_mean.data[:] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[:] = (1.0 - momentum) * running_var.data + momentum * var
    else:
        invstd = 1.0 / np.sqrt(running_var.data + np.float32(eps))
        xhat = (x.data - running_mean.data[None, :, None, None]) * invstd[None, :, None, None]

    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    if tape is not None:
        if mode == "train":
            m = n * h * wd

            def backward(gout: np.ndarray):
                ggamma = (gout * xhat).sum(axis=(0, 2, 3))
                gbeta = gout.sum(axis=(0, 2, 3))
                gxhat = gout * gamma.data[None, :, None, None]
                sum_gxhat = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (invstd[None, :, None, None] / m) * (
                    m * gxhat - sum_gxhat - xhat * sum_gxhat_xhat
                )
                return gx.astype(np.float32, copy=False), ggamma, gbeta, None, None
        else:
            def backward(gout: np.ndarray):
                ggamma = (gout * xhat).sum(axis=(0, 2, 3))
                gbeta = gout.sum(axis=(0, 2, 3))
                gx = gout * (gamma.data * invstd)[None, :, None, None]
                return gx, ggamma, gbeta, None, None

        tape.record((x, gamma, beta, running_mean, running_var), out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and dense layers

def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = (x.data > 0.0).astype(np.float32)

        def backward(gout: np.ndarray):
            return (gout * mask,)

        tape.record((x,), out, backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map: (N, F) @ (G, F)^T + (G,) -> (N, G)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {w.shape}")
    n, f = x.shape
    g, f_w = w.shape
    if f != f_w:
        raise ValueError(
            f"linear feature mismatch: input shape {x.shape} has {f} features "
            f"but weight shape {w.shape} expects {f_w}"
        )
    if b.shape != (g,):
        raise ValueError(f"linear bias shape {b.shape} != ({g},)")
    out = Tensor(x.data @ w.data.T + b.data)

    if tape is not None:
        def backward(gout: np.ndarray):
            gx = gout @ w.data
            gw = gout.T @ x.data
            gb = gout.sum(axis=0)
            return gx, gw, gb

        tape.record((x, w, b), out, backward)
    return out


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and scales
    survivors by 1/(1-p); eval mode is the identity."""
    _check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape, dtype=np.float32) >= p)
    mask = keep.astype(np.float32) * np.float32(1.0 / (1.0 - p))
    out = Tensor(x.data * mask)

    if tape is not None:
        def backward(gout: np.ndarray):
            return (gout * mask,)

        tape.record((x,), out, backward)
    return out


# ---------------------------------------------------------------------------
# classification head

def softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if x.ndim != 2:
        raise ValueError(f"softmax expects (N, K) logits, got {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax input must be finite")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    if tape is not None:
        def backward(gout: np.ndarray):
            inner = (gout * y).sum(axis=1, keepdims=True)
            return (y * (gout - inner),)

        tape.record((x,), out, backward)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[n, labels[n]].

    Returns a 0-d tensor.  The gradient with respect to the logits is
    (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"labels must lie in 0..{k - 1}, got range [{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = np.float32((lse - picked).mean())
    out = Tensor(loss.reshape(()))

    if tape is not None:
        probs = np.exp(z - lse[:, None])

        def backward(gout: np.ndarray):
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            g *= np.float32(gout) / np.float32(n)
            return (g, )

        tape.record((logits,), out, backward)
    return out


# ---------------------------------------------------------------------------
# pooling and stacking

def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    n, c, h, wd = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    if tape is not None:
        scale = np.float32(1.0 / (h * wd))

        def backward(gout: np.ndarray):
            return (np.broadcast_to((gout * scale)[:, :, None, None], x.shape),)

        tape.record((x,), out, backward)
    return out


def concat_channels(inputs: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate (C_i, H, W) tensors along channels in argument order."""
    if len(inputs) == 0:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        if t.ndim != 3:
            raise ValueError(f"concat_channels expects (C, H, W) inputs, got {t.shape}")
    hw = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        if t.shape[1:] != hw:
            raise ValueError(
                f"concat_channels spatial mismatch: input 0 is {inputs[0].shape}, "
                f"input {i} is {t.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in inputs], axis=0))

    if tape is not None:
        sizes = [t.shape[0] for t in inputs]

        def backward(gout: np.ndarray):
            grads = []
            offset = 0
            for c in sizes:
                grads.append(np.ascontiguousarray(gout[offset:offset + c]))
                offset += c
            return grads

        tape.record(tuple(inputs), out, backward)
    return out
