"""Differentiable layers: strided convolution, transposed convolution, batch
normalization, ReLU, two-channel softmax, channel concatenation, replication
upsampling and a small max-pool fixture.

Convolutions are 3x3 (or 1x1 for the heads) with zero padding chosen so that
stride-1 layers preserve spatial size and stride-2 layers exactly halve it;
transposed convolutions exactly double it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, concat


@dataclass
class ConvParams:
    """Weights (out_ch, in_ch, kh, kw) for conv; (in_ch, out_ch, kh, kw) for
    transposed conv.  Padding is implied by kernel size: (k - 1) // 2."""
    weight: Tensor
    bias: Tensor
    stride: int = 1

    @property
    def pad(self) -> int:
        return (self.weight.data.shape[2] - 1) // 2


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        c = self.gamma.data.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=np.float64)


# -- raw convolution kernels (shared by forward and adjoint paths) -------------

def _conv_fwd(x, w, stride, pad):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {ic}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    if hp < kh or wp < kw:
        raise ValueError("input smaller than kernel after padding")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (n, c, ho, wo, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_w(x, gy, stride, pad, kh, kw):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # gy: (n, oc, ho, wo); win: (n, c, ho, wo, kh, kw) -> (oc, c, kh, kw)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_bwd_data(gy, w, stride, pad, in_hw):
    """Gradient of a correlation w.r.t. its input; also the forward map of the
    transposed convolution with the same kernel."""
    n, oc, ho, wo = gy.shape
    _, ic, kh, kw = w.shape
    h, wd = in_hw
    if stride > 1:
        dil = np.zeros((n, oc, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                       dtype=gy.dtype)
        dil[:, :, ::stride, ::stride] = gy
    else:
        dil = gy
    p = kh - 1 - pad
    q = kw - 1 - pad
    dil = np.pad(dil, ((0, 0), (0, 0),
                       (p, h + pad - dil.shape[2] - p + kh - 1 - pad),
                       (q, wd + pad - dil.shape[3] - q + kw - 1 - pad)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_fwd(dil, wt, 1, 0)


# -- autodiff-aware layers -----------------------------------------------------

def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    w, b, stride, pad = params.weight, params.bias, params.stride, params.pad
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    h, wd = x.data.shape[2], x.data.shape[3]
    if stride == 2 and (h % 2 or wd % 2):
        raise ValueError(f"stride-2 conv needs even spatial size, got {h}x{wd}")
    out = _conv_fwd(x.data, w.data, stride, pad) + b.data.reshape(1, -1, 1, 1)
    kh, kw = w.data.shape[2], w.data.shape[3]

    def bwd(g):
        gx = _conv_bwd_data(g, w.data, stride, pad, (h, wd)) if x.requires_grad else None
        gw = _conv_bwd_w(x.data, g, stride, pad, kh, kw) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, (x, w, b), bwd)


def deconv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Transposed convolution with stride 2; exact adjoint of the matching
    stride-2 convolution, so spatial size doubles."""
    w, b = params.weight, params.bias
    if params.stride != 2:
        raise ValueError("deconv2d requires stride 2")
    cin, cout, kh, kw = w.data.shape
    if x.data.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.data.shape[1]}, kernel expects {cin}")
    pad = params.pad
    h, wd = x.data.shape[2], x.data.shape[3]
    out_hw = (2 * h, 2 * wd)
    out = _conv_bwd_data(x.data, w.data, 2, pad, out_hw) + b.data.reshape(1, -1, 1, 1)

    def bwd(g):
        gx = _conv_fwd(g, w.data, 2, pad) if x.requires_grad else None
        gw = _conv_bwd_w(g, x.data, 2, pad, kh, kw) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, (x, w, b), bwd)


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = "train",
               update_running: bool = True) -> Tensor:
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    gamma, beta, eps = params.gamma, params.beta, params.eps
    n = x.data.shape[0]

    if mode == "inference":
        rm = params.running_mean.astype(x.data.dtype).reshape(1, -1, 1, 1)
        rv = params.running_var.astype(x.data.dtype).reshape(1, -1, 1, 1)
        scale = 1.0 / np.sqrt(rv + eps)
        xhat = (x.data - rm) * scale
        out = gamma.data.reshape(1, -1, 1, 1) * xhat + beta.data.reshape(1, -1, 1, 1)

        def bwd(g):
            gx = (g * (gamma.data.reshape(1, -1, 1, 1) * scale)
                  if x.requires_grad else None)
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb

        return Tensor._make(out, (x, gamma, beta), bwd)

    if n < 2:
        raise ValueError("batch norm in train mode needs batch size >= 2")
    m = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - m) * inv
    out = gamma.data.reshape(1, -1, 1, 1) * xhat + beta.data.reshape(1, -1, 1, 1)

    if update_running:
        mom = params.momentum
        params.running_mean = mom * params.running_mean + (1 - mom) * m.reshape(-1).astype(np.float64)
        params.running_var = mom * params.running_var + (1 - mom) * var.reshape(-1).astype(np.float64)

    cnt = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, -1, 1, 1)
            gx = (inv / cnt) * (cnt * gxhat
                                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), bwd)


def softmax2(x: Tensor) -> Tensor:
    """Per-pixel softmax over exactly two channels (axis 1), max-stabilized."""
    if x.data.shape[1] != 2:
        raise ValueError(f"softmax2 expects 2 channels, got {x.data.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return Tensor._make(p, (x,), bwd)


def replicate_upsample(x: Tensor, n: int) -> Tensor:
    """Each input value fills an n x n output block; the backward pass sums
    gradients over the block."""
    if n < 1:
        raise ValueError("upsample factor must be >= 1")
    if n == 1:
        return x
    nb, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, n, axis=2), n, axis=3)

    def bwd(g):
        return (g.reshape(nb, c, h, n, w, n).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bwd)


def concat_channels(inputs) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels of empty list")
    hw = inputs[0].data.shape[2:]
    nb = inputs[0].data.shape[0]
    for t in inputs:
        if t.data.shape[2:] != hw or t.data.shape[0] != nb:
            raise ValueError("concat_channels inputs must share N, H, W")
    return concat(inputs, axis=1)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; bound-analysis fixture, not used by the model."""
    nb, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("max_pool2x2 needs even spatial size")
    blk = x.data.reshape(nb, c, h // 2, 2, w // 2, 2)
    flat = blk.transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(nb, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(nb, c, h, w).copy(),)

    return Tensor._make(out, (x,), bwd)
