"""Naive loop kernels kept permanently as test oracles.

These trade speed for obviousness: six nested loops, no patch-matrix
lowering, no vectorized indexing. The optimized kernels in `ops` must agree
with these on random inputs; tests enforce that, so do not "optimize" this
module.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def pad_amounts(h: int, w: int, kh: int, kw: int, stride: int, padding: str) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding for `valid`/`same`.

    `same` chooses total padding so out = ceil(in / stride); an odd total
    puts the extra row/column on the bottom/right.
    """
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding != "same":
        raise ValueError(f"unknown padding {padding!r}")
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    total_h = max((out_h - 1) * stride + kh - h, 0)
    total_w = max((out_w - 1) * stride + kw - w, 0)
    top = total_h // 2
    left = total_w // 2
    return (top, total_h - top, left, total_w - left)


def conv_out_size(h: int, w: int, kh: int, kw: int, stride: int, padding: str) -> tuple[int, int]:
    t, b, l, r = pad_amounts(h, w, kh, kw, stride, padding)
    return ((h + t + b - kh) // stride + 1, (w + l + r - kw) // stride + 1)


def conv2d_loops(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: str) -> Tensor:
    """Direct convolution (cross-correlation), six nested loops."""
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    assert cin == cin_w
    t, bo, l, r = pad_amounts(h, wd, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (t, bo), (l, r)))
    oh, ow = conv_out_size(h, wd, kh, kw, stride, padding)
    y = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[ni, ci, oi * stride + ki, oj * stride + kj] * w[co, ci, ki, kj]
                    y[ni, co, oi, oj] = acc + (b[co] if b is not None else 0.0)
    return y


def depthwise_conv2d_loops(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: str) -> Tensor:
    """Per-channel convolution; weight layout C x 1 x Kh x Kw."""
    n, c, h, wd = x.shape
    cw, one, kh, kw = w.shape
    assert cw == c and one == 1
    t, bo, l, r = pad_amounts(h, wd, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (t, bo), (l, r)))
    oh, ow = conv_out_size(h, wd, kh, kw, stride, padding)
    y = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += xp[ni, ci, oi * stride + ki, oj * stride + kj] * w[ci, 0, ki, kj]
                    y[ni, ci, oi, oj] = acc + (b[ci] if b is not None else 0.0)
    return y


def maxpool2d_loops(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    y = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    best = -np.inf
                    for ki in range(k):
                        for kj in range(k):
                            v = xp[ni, ci, oi * stride + ki, oj * stride + kj]
                            if v > best:
                                best = v
                    y[ni, ci, oi, oj] = best
    return y


def avgpool2d_loops(x: Tensor, k: int, stride: int) -> Tensor:
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    y = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            acc += x[ni, ci, oi * stride + ki, oj * stride + kj]
                    y[ni, ci, oi, oj] = acc / (k * k)
    return y
