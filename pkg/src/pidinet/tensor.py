"""Dense NCHW primitives with explicit forward and backward passes.

Tensors are plain numpy arrays of shape (N, C, H, W). Every op computes in
the dtype of its inputs, so float64 inputs give a double precision path for
gradient checks while the network itself stores float32.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, ParameterError


@dataclass
class ConvParams:
    """Kernel of shape (C_out, C_in // groups, kH, kW) plus layout options."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise DimensionError(f"kernel must be 4-D, got shape {self.weight.shape}")
        if self.stride < 1:
            raise ParameterError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ParameterError(f"dilation must be positive, got {self.dilation}")
        if self.padding < 0:
            raise ParameterError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1 or self.weight.shape[0] % self.groups:
            raise ParameterError(
                f"groups={self.groups} does not divide C_out={self.weight.shape[0]}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    def output_hw(self, h, w):
        kh, kw = self.kernel_size
        eh = self.dilation * (kh - 1) + 1
        ew = self.dilation * (kw - 1) + 1
        oh = (h + 2 * self.padding - eh) // self.stride + 1
        ow = (w + 2 * self.padding - ew) // self.stride + 1
        return oh, ow


def _check4(x, what="input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, kh, kw, oh, ow, stride, dilation):
    """Read-only view (N, C, kh, kw, oh, ow) over a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def _tap(xp, i, j, oh, ow, stride, dilation):
    r, c = i * dilation, j * dilation
    return xp[:, :, r:r + stride * (oh - 1) + 1:stride, c:c + stride * (ow - 1) + 1:stride]


def _check_conv(x, p):
    _check4(x)
    n, c, h, w = x.shape
    if c % p.groups:
        raise DimensionError(f"input channels {c} not divisible by groups {p.groups}")
    if p.weight.shape[1] * p.groups != c:
        raise DimensionError(
            f"kernel expects {p.weight.shape[1] * p.groups} input channels, got {c}")
    oh, ow = p.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {h}x{w} too small for kernel {p.kernel_size}")
    return oh, ow


def _is_depthwise(x, p):
    return p.groups == x.shape[1] and p.weight.shape[0] == p.groups and p.groups > 1


def conv2d(x, p: ConvParams):
    """Zero-padded cross-correlation, y = sum_i w_i * x_i over each window."""
    oh, ow = _check_conv(x, p)
    n, c, h, w = x.shape
    cout = p.out_channels
    kh, kw = p.kernel_size
    wt = p.weight.astype(x.dtype, copy=False)

    if kh == kw == 1 and p.stride == 1 and p.padding == 0 and p.groups == 1:
        y = np.matmul(wt.reshape(cout, c), x.reshape(n, c, h * w)).reshape(n, cout, oh, ow)
    elif _is_depthwise(x, p):
        xp = _pad(x, p.padding)
        y = np.zeros((n, c, oh, ow), dtype=x.dtype)
        tmp = np.empty_like(y)
        for i in range(kh):
            for j in range(kw):
                wij = wt[:, 0, i, j]
                if not wij.any():
                    continue
                np.multiply(_tap(xp, i, j, oh, ow, p.stride, p.dilation),
                            wij[None, :, None, None], out=tmp)
                y += tmp
    else:
        xp = _pad(x, p.padding)
        win = _windows(xp, kh, kw, oh, ow, p.stride, p.dilation)
        cg, og = c // p.groups, cout // p.groups
        y = np.empty((n, cout, oh, ow), dtype=x.dtype)
        for g in range(p.groups):
            cols = win[:, g * cg:(g + 1) * cg].reshape(n, cg * kh * kw, oh * ow)
            wg = wt[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
            y[:, g * og:(g + 1) * og] = np.matmul(wg, cols).reshape(n, og, oh, ow)

    if p.bias is not None:
        y += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return y


def conv2d_backward(x, p: ConvParams, grad_out):
    """Adjoint of conv2d. Returns (grad_x, grad_weight, grad_bias or None)."""
    oh, ow = _check_conv(x, p)
    n, c, h, w = x.shape
    cout = p.out_channels
    if grad_out.shape != (n, cout, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(n, cout, oh, ow)}")
    kh, kw = p.kernel_size
    wt = p.weight.astype(x.dtype, copy=False)
    gy = grad_out.astype(x.dtype, copy=False)
    gb = gy.sum(axis=(0, 2, 3)) if p.bias is not None else None

    if kh == kw == 1 and p.stride == 1 and p.padding == 0 and p.groups == 1:
        g2 = gy.reshape(n, cout, h * w)
        x2 = x.reshape(n, c, h * w)
        gw = np.einsum("nol,ncl->oc", g2, x2, optimize=True).reshape(cout, c, 1, 1)
        gx = np.matmul(wt.reshape(cout, c).T, g2).reshape(n, c, h, w)
        return gx, gw, gb

    xp = _pad(x, p.padding)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(wt)
    if _is_depthwise(x, p):
        tmp = np.empty_like(gy)
        for i in range(kh):
            for j in range(kw):
                xs = _tap(xp, i, j, oh, ow, p.stride, p.dilation)
                np.multiply(gy, xs, out=tmp)
                gw[:, 0, i, j] = tmp.sum(axis=(0, 2, 3))
                np.multiply(gy, wt[:, 0, i, j][None, :, None, None], out=tmp)
                _tap(gxp, i, j, oh, ow, p.stride, p.dilation)[...] += tmp
    else:
        win = _windows(xp, kh, kw, oh, ow, p.stride, p.dilation)
        cg, og = c // p.groups, cout // p.groups
        gcols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
        for g in range(p.groups):
            cols = win[:, g * cg:(g + 1) * cg].reshape(n, cg * kh * kw, oh * ow)
            gyg = gy[:, g * og:(g + 1) * og].reshape(n, og, oh * ow)
            wg = wt[g * og:(g + 1) * og].reshape(og, cg * kh * kw)
            gw[g * og:(g + 1) * og] = np.einsum(
                "nol,nkl->ok", gyg, cols, optimize=True).reshape(og, cg, kh, kw)
            gcols[:, g * cg:(g + 1) * cg] = np.matmul(wg.T, gyg).reshape(n, cg, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                _tap(gxp, i, j, oh, ow, p.stride, p.dilation)[...] += gcols[:, :, i, j]

    pad = p.padding
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return np.ascontiguousarray(gx), gw, gb


def maxpool2(x):
    """2x2 / stride-2 max pool. Odd trailing rows and columns are dropped.

    Returns the pooled map and the within-window argmax (0..3, row-major) that
    the backward pass needs.
    """
    _check4(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"cannot max-pool a {h}x{w} map")
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool2_backward(grad_out, idx, in_shape):
    n, c, h, w = in_shape
    h2, w2 = idx.shape[2:]
    if grad_out.shape != idx.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != {idx.shape}")
    g = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    gx = np.zeros(in_shape, dtype=grad_out.dtype)
    gx[:, :, :2 * h2, :2 * w2] = g
    return gx


def _interp_matrix(n_in, n_out, dtype):
    """Row-stochastic (n_out, n_in) matrix of half-pixel-center linear weights."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_upsample(x, out_h, out_w):
    _check4(x)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ry = _interp_matrix(h, out_h, x.dtype)
    rx = _interp_matrix(w, out_w, x.dtype)
    return np.matmul(np.matmul(ry, x), rx.T)


def bilinear_upsample_backward(grad_out, in_h, in_w):
    out_h, out_w = grad_out.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    ry = _interp_matrix(in_h, out_h, grad_out.dtype)
    rx = _interp_matrix(in_w, out_w, grad_out.dtype)
    return np.matmul(np.matmul(ry.T, grad_out), rx)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_out):
    """Backward through sigmoid given its output y."""
    return grad_out * y * (1 - y)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b)
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


def mul(a, b):
    _same_shape(a, b)
    return a * b


def mul_backward(a, b, grad_out):
    return grad_out * b, grad_out * a


def concat_channels(xs):
    if not xs:
        raise DimensionError("nothing to concatenate")
    n, _, h, w = xs[0].shape
    for t in xs:
        _check4(t)
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat needs matching N,H,W: {xs[0].shape} vs {t.shape}")
    return np.concatenate(xs, axis=1)


def concat_channels_backward(grad_out, channels):
    """Split a channel-concatenated gradient back into per-input pieces."""
    return np.split(grad_out, np.cumsum(channels)[:-1], axis=1)
