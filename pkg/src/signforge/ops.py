"""Forward/backward numeric kernels: conv, pooling, batchnorm, linear, loss.

Every op is a pure function over immutable inputs and has a paired grad op
(fixed scheme, no autograd). The convolution forward lowers patches to a
matrix multiply (im2col); `reference` holds the loop oracles the tests pin
these kernels against. Kernels keep the dtype of their input so they can be
rerun in float64 by the gradient-check harness.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .reference import conv_out_size, pad_amounts
from .tensor import Tensor, ShapeError, check_finite


@dataclass(frozen=True)
class ConvParams:
    """Convolution configuration: weights, optional bias, stride, padding.

    `same` padding requires odd kernels (symmetric pad; with stride > 1 an
    odd total pad puts the extra row/column bottom/right).
    """
    weights: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got shape {self.weights.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        kh, kw = self.weights.shape[2], self.weights.shape[3]
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ShapeError(f"'same' padding requires odd kernel, got {kh}x{kw}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias must have shape ({self.weights.shape[0]},), got {self.bias.shape}")


@dataclass(frozen=True)
class BatchNormState:
    """Per-channel affine normalization parameters and running statistics.

    Train mode normalizes by batch statistics over N*H*W and folds them into
    the running stats with `momentum` (new = (1-m)*old + m*batch); infer mode
    is a deterministic affine map using the running stats only.
    """
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @staticmethod
    def initial(channels: int, dtype=np.float32) -> "BatchNormState":
        return BatchNormState(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def astype(self, dtype) -> "BatchNormState":
        return BatchNormState(self.gamma.astype(dtype), self.beta.astype(dtype),
                              self.running_mean.astype(dtype), self.running_var.astype(dtype),
                              self.epsilon, self.momentum)


# ---------------------------------------------------------------------------
# im2col plumbing

def _im2col(xp: Tensor, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    """Padded input -> patch matrix of shape (N*oh*ow, C*kh*kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _dilate_pad(grad_out: Tensor, stride: int, in_hw: tuple[int, int],
                k_hw: tuple[int, int], pads: tuple[int, int, int, int]) -> Tensor:
    """Insert stride-1 zeros between grad cells and pad so that a stride-1
    valid correlation with the flipped kernel lands exactly on the input."""
    n, c, oh, ow = grad_out.shape
    h, w = in_hw
    kh, kw = k_hw
    hd, wd = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    top, left = kh - 1 - pads[0], kw - 1 - pads[2]
    bottom, right = h + pads[0] - hd, w + pads[2] - wd
    out = np.zeros((n, c, hd + top + bottom, wd + left + right), dtype=grad_out.dtype)
    out[:, :, top:top + hd:stride, left:left + wd:stride] = grad_out
    return out


def _check_input(x: Tensor, cin: int, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be N x C x H x W, got shape {x.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"{op}: channel axis mismatch, input has {x.shape[1]} channels, "
                         f"weights expect {cin}")


# ---------------------------------------------------------------------------
# Standard convolution

def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-d convolution (cross-correlation), NCHW in, NCHW out."""
    cout, cin, kh, kw = p.weights.shape
    _check_input(x, cin, "conv2d")
    n, _, h, w = x.shape
    pads = pad_amounts(h, w, kh, kw, p.stride, p.padding)
    oh, ow = conv_out_size(h, w, kh, kw, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w} (valid padding)")
    if kh == 1 and kw == 1:
        # pointwise: a batched channel-mixing matmul, no patch extraction
        xs = x[:, :, ::p.stride, ::p.stride] if p.stride > 1 else x
        y = np.matmul(p.weights.reshape(cout, cin), xs.reshape(n, cin, oh * ow))
        if p.bias is not None:
            y += p.bias[None, :, None]
        return check_finite(y.reshape(n, cout, oh, ow), "conv2d output")
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    cols = _im2col(xp, kh, kw, p.stride, oh, ow)
    y = cols @ p.weights.reshape(cout, -1).T
    if p.bias is not None:
        y += p.bias
    y = y.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    return check_finite(np.ascontiguousarray(y), "conv2d output")


def conv2d_grad(x: Tensor, p: ConvParams, grad_out: Tensor
                ) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    """Gradients of conv2d w.r.t. input, weights and bias."""
    cout, cin, kh, kw = p.weights.shape
    _check_input(x, cin, "conv2d_grad")
    h, w = x.shape[2], x.shape[3]
    pads = pad_amounts(h, w, kh, kw, p.stride, p.padding)
    oh, ow = conv_out_size(h, w, kh, kw, p.stride, p.padding)
    if grad_out.shape != (x.shape[0], cout, oh, ow):
        raise ShapeError(f"conv2d_grad: grad_out shape {grad_out.shape} does not match "
                         f"output shape {(x.shape[0], cout, oh, ow)}")
    n = x.shape[0]
    if kh == 1 and kw == 1:
        xs = x[:, :, ::p.stride, ::p.stride] if p.stride > 1 else x
        xr = xs.reshape(n, cin, oh * ow)
        gr = grad_out.reshape(n, cout, oh * ow)
        w2d = p.weights.reshape(cout, cin)
        grad_w = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0).reshape(p.weights.shape)
        grad_b = gr.sum(axis=(0, 2)) if p.bias is not None else None
        dxs = np.matmul(w2d.T, gr).reshape(n, cin, oh, ow)
        if p.stride > 1:
            grad_x = np.zeros_like(x)
            grad_x[:, :, ::p.stride, ::p.stride] = dxs
        else:
            grad_x = dxs
        return check_finite(grad_x, "conv2d grad_input"), grad_w, grad_b
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    cols = _im2col(xp, kh, kw, p.stride, oh, ow)
    gmat = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, cout)
    grad_w = (gmat.T @ cols).reshape(p.weights.shape)
    grad_b = gmat.sum(axis=0) if p.bias is not None else None
    # input gradient as a transposed convolution: dilate grad_out by the
    # stride, pad for full correlation, convolve with the flipped kernel
    gdil = _dilate_pad(grad_out, p.stride, (h, w), (kh, kw), pads)
    w_flip = np.ascontiguousarray(p.weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    gcols = _im2col(gdil, kh, kw, 1, h, w)
    grad_x = (gcols @ w_flip.reshape(cin, -1).T).reshape(x.shape[0], h, w, cin)
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    check_finite(grad_x, "conv2d grad_input")
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Depthwise convolution

def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Per-channel convolution; weights C x 1 x Kh x Kw; channels never mix."""
    c, one, kh, kw = p.weights.shape
    if one != 1:
        raise ShapeError(f"depthwise weights must be C x 1 x Kh x Kw, got {p.weights.shape}")
    _check_input(x, c, "depthwise_conv2d")
    h, w = x.shape[2], x.shape[3]
    pads = pad_amounts(h, w, kh, kw, p.stride, p.padding)
    oh, ow = conv_out_size(h, w, kh, kw, p.stride, p.padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    # per kernel offset: strided slice * per-channel weight, accumulated
    y = np.zeros((x.shape[0], c, oh, ow), dtype=x.dtype)
    s = p.stride
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, :, ki:ki + (oh - 1) * s + 1:s, kj:kj + (ow - 1) * s + 1:s]
            y += sl * p.weights[None, :, 0, ki, kj, None, None]
    if p.bias is not None:
        y += p.bias[:, None, None]
    return check_finite(y, "depthwise output")


def depthwise_conv2d_grad(x: Tensor, p: ConvParams, grad_out: Tensor
                          ) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    c, _, kh, kw = p.weights.shape
    _check_input(x, c, "depthwise_conv2d_grad")
    h, w = x.shape[2], x.shape[3]
    pads = pad_amounts(h, w, kh, kw, p.stride, p.padding)
    oh, ow = conv_out_size(h, w, kh, kw, p.stride, p.padding)
    if grad_out.shape != (x.shape[0], c, oh, ow):
        raise ShapeError(f"depthwise_conv2d_grad: grad_out shape {grad_out.shape} does not "
                         f"match output shape {(x.shape[0], c, oh, ow)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    s = p.stride
    grad_w = np.zeros_like(p.weights)
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, :, ki:ki + (oh - 1) * s + 1:s, kj:kj + (ow - 1) * s + 1:s]
            grad_w[:, 0, ki, kj] = (sl * grad_out).sum(axis=(0, 2, 3))
    grad_b = grad_out.sum(axis=(0, 2, 3)) if p.bias is not None else None
    # input gradient: stride-1 correlation of the dilated grad with the
    # flipped per-channel kernels, again via offset accumulation
    gdil = _dilate_pad(grad_out, s, (h, w), (kh, kw), pads)
    grad_x = np.zeros_like(x)
    for ki in range(kh):
        for kj in range(kw):
            sl = gdil[:, :, ki:ki + h, kj:kj + w]
            grad_x += sl * p.weights[None, :, 0, kh - 1 - ki, kw - 1 - kj, None, None]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Pooling

def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> tuple[Tensor, Tensor]:
    """Max pooling. Returns (output, argmax) where argmax holds, per output
    cell, the flat index into the k*k window of the first maximum (row-major),
    which the grad op uses to route gradient."""
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"maxpool2d: window {k} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)          # first max wins ties
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), arg


def maxpool2d_grad(x_shape: tuple, argmax: Tensor, grad_out: Tensor,
                   k: int, stride: int, padding: int = 0) -> Tensor:
    """Routes each output-cell gradient to its recorded argmax position."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = argmax.shape[2], argmax.shape[3]
    grad_p = np.zeros((n, c, hp, wp), dtype=grad_out.dtype)
    ki = argmax // k
    kj = argmax % k
    oi = stride * np.arange(oh)[None, None, :, None]
    oj = stride * np.arange(ow)[None, None, None, :]
    rows = (oi + ki).reshape(n, c, -1)
    cols = (oj + kj).reshape(n, c, -1)
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(grad_p, (ni, ci, rows, cols), grad_out.reshape(n, c, -1))
    return grad_p[:, :, padding:padding + h, padding:padding + w] if padding else grad_p


def avgpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"avgpool2d: window {k} larger than input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.mean(axis=(-2, -1)).astype(x.dtype, copy=False))


def avgpool2d_grad(x_shape: tuple, grad_out: Tensor, k: int, stride: int) -> Tensor:
    n, c, h, w = x_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    g = grad_out / (k * k)
    for ki in range(k):
        for kj in range(k):
            grad_x[:, :, ki:ki + (oh - 1) * stride + 1:stride,
                   kj:kj + (ow - 1) * stride + 1:stride] += g
    return grad_x


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: N x C x H x W -> N x C."""
    return x.mean(axis=(2, 3))


def global_avg_pool_grad(x_shape: tuple, grad_out: Tensor) -> Tensor:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).astype(
        grad_out.dtype, copy=True)


# ---------------------------------------------------------------------------
# Batch normalization

def batchnorm2d(x: Tensor, state: BatchNormState, mode: str
                ) -> tuple[Tensor, BatchNormState, tuple]:
    """Channelwise batch normalization.

    Returns (output, new_state, cache). Train mode normalizes by batch
    statistics and returns a state with updated running stats; infer mode is
    the affine map from running stats and returns `state` unchanged. The
    cache feeds batchnorm2d_grad.
    """
    c = state.channels
    _check_input(x, c, "batchnorm2d")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        m = state.momentum
        new_state = replace(
            state,
            running_mean=((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype),
            running_var=((1 - m) * state.running_var + m * var).astype(state.running_var.dtype),
        )
    elif mode == "infer":
        mean = state.running_mean
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        new_state = state
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    # fold normalize + affine into one fused pass: y = a*x + b
    a = (state.gamma * inv_std).astype(x.dtype)
    b = (state.beta - mean * state.gamma * inv_std).astype(x.dtype)
    y = a[None, :, None, None] * x + b[None, :, None, None]
    cache = (mode, x, mean.astype(x.dtype), inv_std.astype(x.dtype), state.gamma)
    return check_finite(y, "batchnorm output"), new_state, cache


def batchnorm2d_grad(cache: tuple, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients w.r.t. input, gamma, beta from a batchnorm2d cache."""
    mode, x, mean, inv_std, gamma = cache
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    if mode == "infer":
        grad_x = grad_out * (gamma * inv_std)[None, :, None, None]
        return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta
    g = grad_out * gamma[None, :, None, None]
    mean_g = g.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std[None, :, None, None] * (g - mean_g - xhat * mean_gx)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Elementwise / dense / loss

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_grad(x: Tensor, grad_out: Tensor) -> Tensor:
    return grad_out * (x > 0)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense map: x (N,D) @ w (D,K) + b."""
    if x.ndim != 2:
        raise ShapeError(f"linear: input must be N x D, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: feature axis mismatch, input D={x.shape[1]}, "
                         f"weights expect D={w.shape[0]}")
    y = x @ w
    if b is not None:
        y += b
    return check_finite(y, "linear output")


def linear_grad(x: Tensor, w: Tensor, grad_out: Tensor, with_bias: bool = True
                ) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0) if with_bias else None
    return grad_x, grad_w, grad_b


def softmax(logits: Tensor) -> Tensor:
    """Row-wise stable softmax; rows sum to 1 within 1e-6."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean negative log-likelihood and its gradient (softmax - onehot)/N."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    nll = logsumexp - z[np.arange(n), labels]
    loss = float(nll.mean())
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
