"""Differentiable neural layers: strided/dilated convolution, 2x2 max
pooling, activations, per-pixel softmax, and local contrast normalization.

Convolution uses cross-correlation semantics (no kernel flip), symmetric
zero-padding only. All tensors are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _make, max_with_scalar


@dataclass
class ConvParams:
    """Learnable state plus geometry for one convolution.

    kernel: (out_channels, in_channels, kh, kw); bias: (out_channels,).
    Effective kernel extent is dilation*(k-1)+1 and must fit in the padded
    input.
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError("conv kernel must be 4D (out, in, kh, kw)")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError("conv bias must be 1D with out_channels entries")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride/dilation must be >= 1, padding >= 0")
        if self.kernel.shape[2] < 1 or self.kernel.shape[3] < 1:
            raise ShapeError("kernel extents must be >= 1")


def conv_out_extent(extent: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (extent + 2 * padding - (dilation * (k - 1) + 1)) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate ``x`` (N, Cin, H, W) with ``p``; differentiable in
    the input, kernel, and bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4D, got {x.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = p.kernel.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_k}")
    st, dil, pad = p.stride, p.dilation, p.padding
    hout = conv_out_extent(h, kh, st, dil, pad)
    wout = conv_out_extent(w, kw, st, dil, pad)
    if hout < 1 or wout < 1:
        raise ShapeError(
            f"conv2d: non-positive output extent ({hout}x{wout}) for input "
            f"{h}x{w}, kernel {kh}x{kw}, stride {st}, dilation {dil}, padding {pad}")

    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kd = p.kernel.data

    # column tensor laid out (c, kh, kw, n, ho, wo) so every contraction
    # below reshapes without copying the big operand
    s0, s1, s2, s3 = xd.strides
    cols = np.ascontiguousarray(np.lib.stride_tricks.as_strided(
        xd, shape=(cin, kh, kw, n, hout, wout),
        strides=(s1, s2 * dil, s3 * dil, s0, s2 * st, s3 * st)))

    out = np.moveaxis(
        np.tensordot(kd, cols, axes=([1, 2, 3], [0, 1, 2])), 0, 1)
    out += p.bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = np.moveaxis(
            np.tensordot(cols, g, axes=([3, 4, 5], [0, 2, 3])), 3, 0)
        gcols = np.tensordot(kd, g, axes=([0], [1]))  # (c, kh, kw, n, ho, wo)
        gx_pad = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :,
                       i * dil: i * dil + (hout - 1) * st + 1: st,
                       j * dil: j * dil + (wout - 1) * st + 1: st] += \
                    np.moveaxis(gcols[:, i, j], 1, 0)
        gx = gx_pad[:, :, pad: pad + h, pad: pad + w] if pad else gx_pad
        gb = g.sum(axis=(0, 2, 3))
        return (gx, np.ascontiguousarray(gk), gb)

    return _make(out, "conv2d", [x, p.kernel, p.bias], bw)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; gradient goes to each window's
    first maximum in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4D, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w),)

    return _make(out, "maxpool2", [x], bw)


def relu(x: Tensor) -> Tensor:
    return max_with_scalar(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """1 / (1 + exp(-x)) with the pre-activation clipped to [-30, 30]."""
    z = np.clip(x.data, -30.0, 30.0)
    out = 1.0 / (1.0 + np.exp(-z))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", [x], bw)


def channel_softmax(x: Tensor) -> Tensor:
    """Normalize over the channel axis per spatial location (max-subtracted
    for stability); each pixel's channel values sum to 1."""
    if x.ndim != 4:
        raise ShapeError(f"channel_softmax input must be 4D, got {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError("channel_softmax needs C >= 2")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, "channel_softmax", [x], bw)


def _box_sums(a: np.ndarray, window: int) -> np.ndarray:
    """Per-pixel sum over a centered window x window box, edge-replicated."""
    r = window // 2
    ap = np.pad(a, r, mode="edge")
    ii = np.zeros((ap.shape[0] + 1, ap.shape[1] + 1))
    ii[1:, 1:] = ap.cumsum(axis=0).cumsum(axis=1)
    return (ii[window:, window:] - ii[:-window, window:]
            - ii[window:, :-window] + ii[:-window, :-window])


def local_contrast_normalize(image, window: int = 9):
    """Per channel, subtract the local box mean and divide by
    max(local box std, 0.01). Data preprocessing: the result carries no
    gradient graph. Accepts and returns either an ndarray or a Tensor.
    """
    is_tensor = isinstance(image, Tensor)
    arr = image.data if is_tensor else np.asarray(image, dtype=np.float64)
    if window % 2 == 0:
        raise ValueError("local_contrast_normalize window must be odd")
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W), got {arr.shape}")
    n, c, h, w = arr.shape
    if window > min(h, w):
        raise ValueError(f"window {window} exceeds image extent {h}x{w}")

    count = float(window * window)
    out = np.empty_like(arr)
    for ni in range(n):
        for ci in range(c):
            plane = arr[ni, ci]
            mean = _box_sums(plane, window) / count
            var = _box_sums(plane * plane, window) / count - mean * mean
            std = np.sqrt(np.maximum(var, 0.0))
            out[ni, ci] = (plane - mean) / np.maximum(std, 0.01)
    if squeeze:
        out = out[0]
    return Tensor(out) if is_tensor else out
