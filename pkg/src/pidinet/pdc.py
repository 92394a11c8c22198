"""Pixel difference convolutions (central, angular, radial).

A PDC kernel multiplies differences of pixel pairs instead of raw pixels.
Because that is linear in the input, each variant folds into an ordinary
kernel: weights are differenced once and a vanilla conv does the rest.

Raw weights always live on a 3x3 grid of shape (C_out, C_in // groups, 3, 3)
with the center entry unused (kept at zero). Positions are 1-based and
row-major, matching the usual x1..x9 (3x3) / x1..x25 (5x5) labelling.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import ConvParams, _pad, _windows, conv2d, conv2d_backward


class PdcKind(str, Enum):
    VANILLA = "V"
    CENTRAL = "C"
    ANGULAR = "A"
    RADIAL = "R"

    @classmethod
    def from_letter(cls, letter):
        try:
            return cls(letter.upper())
        except ValueError:
            raise ParameterError(f"unknown convolution kind {letter!r}") from None


@dataclass(frozen=True)
class PairSet:
    """Ordered pixel pairs (i, i') of one PDC variant.

    weight_index[m] is the 3x3-grid slot (1-based) of the weight applied to
    pair m; patch_size is the side of the patch the pair indices refer to.
    """

    pairs: tuple
    weight_index: tuple
    patch_size: int

    def __len__(self):
        return len(self.pairs)


_PAIRS = {
    PdcKind.CENTRAL: PairSet(
        pairs=((1, 5), (2, 5), (3, 5), (4, 5), (6, 5), (7, 5), (8, 5), (9, 5)),
        weight_index=(1, 2, 3, 4, 6, 7, 8, 9),
        patch_size=3,
    ),
    PdcKind.ANGULAR: PairSet(
        pairs=((1, 2), (2, 3), (3, 6), (4, 1), (6, 9), (7, 4), (8, 7), (9, 8)),
        weight_index=(1, 2, 3, 4, 6, 7, 8, 9),
        patch_size=3,
    ),
    PdcKind.RADIAL: PairSet(
        pairs=((1, 7), (3, 8), (5, 9), (11, 12), (15, 14), (21, 17), (23, 18), (25, 19)),
        weight_index=(1, 2, 3, 4, 6, 7, 8, 9),
        patch_size=5,
    ),
}


def pair_set(kind):
    kind = PdcKind(kind)
    if kind is PdcKind.VANILLA:
        raise ParameterError("vanilla convolution has no pixel pairs")
    return _PAIRS[kind]


def kernel_size(kind):
    """Side of the vanilla kernel a PDC of this kind converts to."""
    return 5 if PdcKind(kind) is PdcKind.RADIAL else 3


def effective_padding(kind, padding):
    """Padding that keeps a converted kernel aligned with a 3x3 layer's padding."""
    return padding + 1 if PdcKind(kind) is PdcKind.RADIAL else padding


def _check_raw(w):
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"PDC weights must have shape (O, I, 3, 3), got {w.shape}")


def convert_weights(w, kind):
    """Fold raw PDC weights into an equivalent vanilla kernel.

    Returns a (O, I, 3, 3) kernel for central/angular and (O, I, 5, 5) for
    radial. The map is linear and never reads the center weight.
    """
    kind = PdcKind(kind)
    if kind is PdcKind.VANILLA:
        raise ParameterError("convert_weights needs a PDC kind, got vanilla")
    _check_raw(w)
    f = w.reshape(w.shape[:2] + (9,))
    w1, w2, w3, w4, _, w6, w7, w8, w9 = (f[..., k] for k in range(9))

    if kind is PdcKind.CENTRAL:
        out = f.copy()
        out[..., 4] = -(w1 + w2 + w3 + w4 + w6 + w7 + w8 + w9)
        return out.reshape(w.shape)

    if kind is PdcKind.ANGULAR:
        out = np.stack([
            w1 - w4, w2 - w1, w3 - w2,
            w4 - w7, np.zeros_like(w1), w6 - w3,
            w7 - w8, w8 - w9, w9 - w6,
        ], axis=-1)
        return out.reshape(w.shape)

    # radial: outer 5x5 ring gets +w, the inner 3x3 ring it points at gets -w
    out = np.zeros(w.shape[:2] + (25,), dtype=w.dtype)
    for outer, inner, k in ((1, 7, 0), (3, 8, 1), (5, 9, 2), (11, 12, 3),
                            (15, 14, 5), (21, 17, 6), (23, 18, 7), (25, 19, 8)):
        out[..., outer - 1] = f[..., k]
        out[..., inner - 1] = -f[..., k]
    return out.reshape(w.shape[:2] + (5, 5))


def convert_weights_backward(grad_kernel, kind):
    """Transpose of convert_weights: pulls a kernel gradient back onto raw weights.

    For every pair (i, i') weighted by w_m the adjoint is g_i - g_i', so this
    is the difference form applied to the gradient kernel itself.
    """
    ps = pair_set(kind)
    k = ps.patch_size
    if grad_kernel.shape[2:] != (k, k):
        raise DimensionError(f"expected a {k}x{k} kernel gradient, got {grad_kernel.shape}")
    g = grad_kernel.reshape(grad_kernel.shape[:2] + (k * k,))
    a = np.array([i - 1 for i, _ in ps.pairs])
    b = np.array([j - 1 for _, j in ps.pairs])
    out = np.zeros(grad_kernel.shape[:2] + (9,), dtype=grad_kernel.dtype)
    out[..., np.array(ps.weight_index) - 1] = g[..., a] - g[..., b]
    return out.reshape(grad_kernel.shape[:2] + (3, 3))


def _conv_params(w, kind, stride, padding, groups, bias=None):
    return ConvParams(convert_weights(w, kind), bias=bias, stride=stride,
                      padding=effective_padding(kind, padding), groups=groups)


def pdc_forward_difference_form(x, w, kind, stride=1, padding=1, groups=1):
    """Direct evaluation of y = sum_m w_m (x_i - x_i') over every window.

    Materialises the pixel-difference tensor and contracts it with the raw
    weights, never touching convert_weights. `padding` is given for the 3x3
    footprint; radial pads one more so all kinds keep the same output size.
    """
    kind = PdcKind(kind)
    if kind is PdcKind.VANILLA:
        return conv2d(x, ConvParams(w, stride=stride, padding=padding, groups=groups))
    _check_raw(w)
    ps = pair_set(kind)
    k = ps.patch_size
    pad = effective_padding(kind, padding)
    # reuse ConvParams only for its shape checks and output size
    probe = ConvParams(np.zeros(w.shape[:2] + (k, k), dtype=w.dtype),
                       stride=stride, padding=pad, groups=groups)
    if x.ndim != 4 or x.shape[1] != w.shape[1] * groups:
        raise DimensionError(f"input shape {x.shape} does not match weights {w.shape}")
    n, c, h, wd = x.shape
    oh, ow = probe.output_hw(h, wd)
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {h}x{wd} too small")

    win = _windows(_pad(x, pad), k, k, oh, ow, stride, 1).reshape(n, c, k * k, oh, ow)
    a = np.array([i - 1 for i, _ in ps.pairs])
    b = np.array([j - 1 for _, j in ps.pairs])
    diff = win[:, :, a] - win[:, :, b]                         # (N, C, m, oh, ow)
    m = len(ps)
    wp = w.reshape(w.shape[:2] + (9,))[..., np.array(ps.weight_index) - 1]  # (O, I, m)
    wp = wp.astype(x.dtype, copy=False)

    cout, cg = w.shape[0], w.shape[1]
    og = cout // groups
    y = np.empty((n, cout, oh, ow), dtype=x.dtype)
    if cg == 1 and og == 1:
        y[:] = np.einsum("ncmhw,cm->nchw", diff, wp[:, 0], optimize=True)
        return y
    for g in range(groups):
        dg = diff[:, g * cg:(g + 1) * cg].reshape(n, cg * m, oh * ow)
        wg = wp[g * og:(g + 1) * og].reshape(og, cg * m)
        y[:, g * og:(g + 1) * og] = np.matmul(wg, dg).reshape(n, og, oh, ow)
    return y


def pdc_conv(x, w, kind, stride=1, padding=1, groups=1, bias=None):
    """PDC through its converted vanilla kernel; vanilla kind passes straight through."""
    kind = PdcKind(kind)
    if kind is PdcKind.VANILLA:
        return conv2d(x, ConvParams(w, bias=bias, stride=stride, padding=padding, groups=groups))
    return conv2d(x, _conv_params(w, kind, stride, padding, groups, bias))


def pdc_conv_backward(x, w, kind, grad_out, stride=1, padding=1, groups=1, bias=None):
    """Returns (grad_x, grad_raw_weights, grad_bias)."""
    kind = PdcKind(kind)
    if kind is PdcKind.VANILLA:
        return conv2d_backward(
            x, ConvParams(w, bias=bias, stride=stride, padding=padding, groups=groups), grad_out)
    gx, gk, gb = conv2d_backward(x, _conv_params(w, kind, stride, padding, groups, bias), grad_out)
    return gx, convert_weights_backward(gk, kind), gb
