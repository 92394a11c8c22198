"""PiDiNet: depthwise-separable residual backbone, side heads and fusion.

Weights live in a flat ``params`` dict keyed by layer name; layer objects
only describe structure. Forward passes never mutate the model, so a built
model can be shared between threads for inference. Training forwards record
intermediate activations on a tape that ``backward`` consumes.
"""
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ArchConfig
from .errors import DimensionError
from .pdc import (PdcKind, convert_weights, effective_padding, kernel_size, pdc_conv,
                  pdc_conv_backward, pdc_forward_difference_form)

CDCM_DILATIONS = (5, 7, 9, 11)
CSAM_CHANNELS = 4


@dataclass
class Conv:
    name: str
    in_ch: int
    out_ch: int
    k: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    bias: bool = False
    kind: PdcKind = PdcKind.VANILLA

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch // self.groups, self.k, self.k)

    @property
    def is_pdc(self):
        return self.kind is not PdcKind.VANILLA

    @property
    def fan_in(self):
        return (self.in_ch // self.groups) * self.k * self.k

    def n_params(self):
        per_kernel = 8 if self.is_pdc else self.k * self.k
        n = self.out_ch * (self.in_ch // self.groups) * per_kernel
        return n + (self.out_ch if self.bias else 0)

    def macs(self, oh, ow):
        k = kernel_size(self.kind) if self.is_pdc else self.k
        return self.out_ch * (self.in_ch // self.groups) * k * k * oh * ow

    def _args(self, params):
        return params[self.name + ".weight"], params.get(self.name + ".bias")

    def forward(self, params, x, tape=None, difference=False):
        if tape is not None:
            tape[self.name] = x
        w, b = self._args(params)
        if not self.is_pdc:
            return T.conv2d(x, T.ConvParams(w, b, padding=self.padding,
                                            dilation=self.dilation, groups=self.groups))
        if difference:
            y = pdc_forward_difference_form(x, w, self.kind, padding=self.padding,
                                            groups=self.groups)
            if b is not None:
                y += b.astype(y.dtype)[None, :, None, None]
            return y
        return pdc_conv(x, w, self.kind, padding=self.padding, groups=self.groups, bias=b)

    def backward(self, params, tape, grad_out, grads):
        x = tape[self.name]
        w, b = self._args(params)
        if self.is_pdc:
            gx, gw, gb = pdc_conv_backward(x, w, self.kind, grad_out, padding=self.padding,
                                           groups=self.groups, bias=b)
        else:
            gx, gw, gb = T.conv2d_backward(
                x, T.ConvParams(w, b, padding=self.padding, dilation=self.dilation,
                                groups=self.groups), grad_out)
        _accumulate(grads, self.name + ".weight", gw)
        if gb is not None:
            _accumulate(grads, self.name + ".bias", gb)
        return gx


def _accumulate(grads, key, g):
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


class Block:
    """Depthwise 3x3 (PDC or vanilla) -> ReLU -> pointwise 1x1, plus shortcut.

    A block that widens the channels first max-pools its input and uses a
    1x1 projection on the shortcut.
    """

    def __init__(self, name, in_ch, out_ch, kind, pool, converted=False):
        self.name = name
        self.pool = pool
        self.dw = _kconv(f"{name}.dw", in_ch, in_ch, kind, groups=in_ch, converted=converted)
        self.pw = Conv(f"{name}.pw", in_ch, out_ch, bias=True)
        self.shortcut = Conv(f"{name}.shortcut", in_ch, out_ch, bias=True) if in_ch != out_ch else None

    def convs(self):
        return [c for c in (self.dw, self.pw, self.shortcut) if c is not None]

    def forward(self, params, x, tape=None, difference=False):
        if self.pool:
            in_shape = x.shape
            x, idx = T.maxpool2(x)
            if tape is not None:
                tape[self.name + ".pool"] = (idx, in_shape)
        h = self.dw.forward(params, x, tape, difference)
        if tape is not None:
            tape[self.name + ".act"] = h
        y = self.pw.forward(params, T.relu(h), tape)
        y += self.shortcut.forward(params, x, tape) if self.shortcut else x
        return y

    def backward(self, params, tape, gy, grads):
        g = self.pw.backward(params, tape, gy, grads)
        g = T.relu_backward(tape[self.name + ".act"], g)
        gx = self.dw.backward(params, tape, g, grads)
        gx += self.shortcut.backward(params, tape, gy, grads) if self.shortcut else gy
        if self.pool:
            idx, in_shape = tape[self.name + ".pool"]
            gx = T.maxpool2_backward(gx, idx, in_shape)
        return gx


def _kconv(name, in_ch, out_ch, kind, groups=1, converted=False):
    """3x3 layer of the given kind, or its vanilla equivalent after conversion."""
    kind = PdcKind(kind)
    if converted and kind is not PdcKind.VANILLA:
        return Conv(name, in_ch, out_ch, k=kernel_size(kind),
                    padding=effective_padding(kind, 1), groups=groups)
    return Conv(name, in_ch, out_ch, k=3, padding=1, groups=groups, kind=kind)


class CDCM:
    """1x1 reduce to M channels, ReLU, then four summed dilated 3x3 branches."""

    def __init__(self, name, in_ch, out_ch):
        self.name = name
        self.reduce = Conv(f"{name}.reduce", in_ch, out_ch, bias=True)
        self.branches = [Conv(f"{name}.branch{d}", out_ch, out_ch, k=3, padding=d, dilation=d)
                         for d in CDCM_DILATIONS]

    def convs(self):
        return [self.reduce] + self.branches

    def forward(self, params, x, tape=None):
        r = self.reduce.forward(params, x, tape)
        if tape is not None:
            tape[self.name + ".act"] = r
        a = T.relu(r)
        y = self.branches[0].forward(params, a, tape)
        for br in self.branches[1:]:
            y += br.forward(params, a, tape)
        return y

    def backward(self, params, tape, gy, grads):
        ga = self.branches[0].backward(params, tape, gy, grads)
        for br in self.branches[1:]:
            ga += br.backward(params, tape, gy, grads)
        ga = T.relu_backward(tape[self.name + ".act"], ga)
        return self.reduce.backward(params, tape, ga, grads)


class CSAM:
    """Spatial gate: x * sigmoid(conv3x3(relu(conv1x1(x))))."""

    def __init__(self, name, channels):
        self.name = name
        self.conv1 = Conv(f"{name}.conv1", channels, CSAM_CHANNELS, bias=True)
        self.conv2 = Conv(f"{name}.conv2", CSAM_CHANNELS, 1, k=3, padding=1)

    def convs(self):
        return [self.conv1, self.conv2]

    def attention(self, params, x, tape=None):
        t = self.conv1.forward(params, x, tape)
        if tape is not None:
            tape[self.name + ".act"] = t
        return T.sigmoid(self.conv2.forward(params, T.relu(t), tape))

    def forward(self, params, x, tape=None):
        a = self.attention(params, x, tape)
        if tape is not None:
            tape[self.name + ".gate"] = (x, a)
        return x * a

    def backward(self, params, tape, gy, grads):
        x, a = tape[self.name + ".gate"]
        gx = gy * a
        ga = (gy * x).sum(axis=1, keepdims=True)
        g = self.conv2.backward(params, tape, T.sigmoid_backward(a, ga), grads)
        g = T.relu_backward(tape[self.name + ".act"], g)
        return gx + self.conv1.backward(params, tape, g, grads)


class SideHead:
    def __init__(self, name, in_ch, cdcm_ch=None, csam=False):
        self.name = name
        self.cdcm = CDCM(f"{name}.cdcm", in_ch, cdcm_ch) if cdcm_ch else None
        ch = cdcm_ch if cdcm_ch else in_ch
        self.csam = CSAM(f"{name}.csam", ch) if csam else None
        self.reduce = Conv(f"{name}.reduce", ch, 1, bias=True)

    def convs(self):
        out = []
        if self.cdcm:
            out += self.cdcm.convs()
        if self.csam:
            out += self.csam.convs()
        return out + [self.reduce]

    def forward(self, params, x, out_hw, tape=None):
        if self.cdcm:
            x = self.cdcm.forward(params, x, tape)
        if self.csam:
            x = self.csam.forward(params, x, tape)
        y = self.reduce.forward(params, x, tape)
        if tape is not None:
            tape[self.name + ".size"] = y.shape[2:]
        return T.bilinear_upsample(y, *out_hw)

    def backward(self, params, tape, gy, grads):
        g = T.bilinear_upsample_backward(gy, *tape[self.name + ".size"])
        g = self.reduce.backward(params, tape, g, grads)
        if self.csam:
            g = self.csam.backward(params, tape, g, grads)
        if self.cdcm:
            g = self.cdcm.backward(params, tape, g, grads)
        return g


class PiDiNetModel:
    """Assembled network. Build with :func:`build_model`."""

    def __init__(self, config: ArchConfig, params=None, seed=0, converted=False,
                 dtype=np.float32):
        self.config = config
        self.seed = seed
        self.converted = converted
        widths = config.stage_widths()
        kinds = iter(config.blocks)

        self.init = _kconv("init", 3, widths[0], next(kinds), converted=converted)
        self.stages = []
        in_ch = widths[0]
        bi = 2
        for s, (n_blocks, _) in enumerate(config.stages):
            out_ch = widths[s]
            n_res = n_blocks - 1 if s == 0 else n_blocks
            blocks = []
            for j in range(n_res):
                blocks.append(Block(f"block{bi}", in_ch, out_ch, next(kinds),
                                    pool=(s > 0 and j == 0), converted=converted))
                in_ch = out_ch
                bi += 1
            self.stages.append(blocks)
        cdcm_ch = config.cdcm_channels if config.use_cdcm else None
        self.heads = [SideHead(f"side{s + 1}", widths[s], cdcm_ch, config.use_csam)
                      for s in range(len(widths))]
        self.fusion = Conv("fusion", len(widths), 1, bias=True)

        if params is None:
            params = init_params(self.convs(), seed, dtype)
        self.params = params

    # structure -------------------------------------------------------------

    def convs(self):
        out = [self.init]
        for blocks in self.stages:
            for b in blocks:
                out += b.convs()
        for h in self.heads:
            out += h.convs()
        return out + [self.fusion]

    def blocks(self):
        return [b for blocks in self.stages for b in blocks]

    def block_kinds(self):
        """Convolution kind actually executed by each of the backbone blocks."""
        return [self.init.kind] + [b.dw.kind for b in self.blocks()]

    @property
    def n_pools(self):
        return len(self.stages) - 1

    def min_size(self):
        return 2 ** (self.n_pools + 1)

    # forward / backward ------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected input of shape (N, 3, H, W), got {x.shape}")
        h, w = x.shape[2:]
        if min(h, w) < self.min_size():
            raise DimensionError(
                f"input {h}x{w} too small for {self.n_pools} poolings (min {self.min_size()})")

    def backbone(self, x, tape=None, difference=False):
        """Stage outputs (before pooling) that feed the side heads."""
        x = self.init.forward(self.params, x, tape, difference)
        feats = []
        for blocks in self.stages:
            for b in blocks:
                x = b.forward(self.params, x, tape, difference)
            feats.append(x)
        return feats

    def _forward(self, x, tape=None, difference=False):
        self._check_input(x)
        out_hw = x.shape[2:]
        feats = self.backbone(x, tape, difference)
        logits = [h.forward(self.params, f, out_hw, tape) for h, f in zip(self.heads, feats)]
        fused_logit = self.fusion.forward(self.params, T.concat_channels(logits), tape)
        side = [T.sigmoid(z) for z in logits]
        fused = T.sigmoid(fused_logit)
        return side, fused

    def forward(self, x, difference=False):
        """Return (side_maps, fused), each (N, 1, H, W) in (0, 1).

        ``difference=True`` evaluates PDC layers in their pixel-difference form
        instead of through converted kernels (slower, same result).
        """
        return self._forward(x, None, difference)

    def forward_train(self, x):
        tape = {}
        side, fused = self._forward(x, tape)
        tape["outputs"] = (side, fused)
        return side, fused, tape

    def backward(self, tape, grad_side, grad_fused):
        """Gradients of every parameter given d(loss)/d(probability) per output map."""
        side, fused = tape["outputs"]
        grads = {}
        g_fused_logit = T.sigmoid_backward(fused, grad_fused)
        g_cat = self.fusion.backward(self.params, tape, g_fused_logit, grads)
        g_logits = T.concat_channels_backward(g_cat, [1] * len(side))
        g_feats = []
        for h, s, gs, gl in zip(self.heads, side, grad_side, g_logits):
            g = gl + (T.sigmoid_backward(s, gs) if gs is not None else 0)
            g_feats.append(h.backward(self.params, tape, g, grads))

        g = None
        for s in reversed(range(len(self.stages))):
            g = g_feats[s] if g is None else g + g_feats[s]
            for b in reversed(self.stages[s]):
                g = b.backward(self.params, tape, g, grads)
        self.init.backward(self.params, tape, g, grads)
        return grads

    # accounting ------------------------------------------------------------

    def conv_sizes(self, h, w):
        """Yield (conv, out_h, out_w) for every convolution at input size h x w."""
        in_h, in_w = h, w
        yield self.init, h, w
        sizes = []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                h, w = h // 2, w // 2
            for b in blocks:
                for c in b.convs():
                    yield c, h, w
            sizes.append((h, w))
        for head, (sh, sw) in zip(self.heads, sizes):
            for c in head.convs():
                yield c, sh, sw
        yield self.fusion, in_h, in_w


def init_params(convs, seed, dtype=np.float32):
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, fusion as an average.

    Each layer draws from its own stream keyed by (seed, layer name), so
    adding or removing side modules never perturbs backbone weights.
    """
    params = {}
    for c in convs:
        rng = np.random.default_rng([seed, zlib.crc32(c.name.encode())])
        if c.name == "fusion":
            w = np.full(c.weight_shape, 1.0 / c.in_ch)
        else:
            bound = np.sqrt(1.0 / c.fan_in)
            w = rng.uniform(-bound, bound, size=c.weight_shape)
            if c.is_pdc:
                w[:, :, 1, 1] = 0.0
        params[c.name + ".weight"] = w.astype(dtype)
        if c.bias:
            params[c.name + ".bias"] = np.zeros(c.out_ch, dtype=dtype)
    return params


def build_model(cfg: ArchConfig, seed=0, dtype=np.float32):
    return PiDiNetModel(cfg, seed=seed, dtype=dtype)


def count_params(model):
    """Learnable weights; unused PDC kernel centers are not counted."""
    return sum(c.n_params() for c in model.convs())


def count_macs(model, h, w):
    """Multiply-accumulates of all convolutions for one h x w image."""
    return sum(c.macs(oh, ow) for c, oh, ow in model.conv_sizes(h, w))


def layer_breakdown(model, h, w):
    return [{"name": c.name, "kind": c.kind.value, "params": c.n_params(),
             "macs": c.macs(oh, ow)} for c, oh, ow in model.conv_sizes(h, w)]


def convert_model_for_inference(model):
    """Copy of ``model`` with every PDC layer replaced by its vanilla kernel."""
    params = {k: v.copy() for k, v in model.params.items()}
    for c in model.convs():
        if c.is_pdc:
            key = c.name + ".weight"
            params[key] = convert_weights(model.params[key], c.kind)
    return PiDiNetModel(model.config, params=params, seed=model.seed, converted=True)


def cdcm_forward(x, params, name="cdcm", out_ch=None):
    """Standalone CDCM on explicit weights (keys ``{name}.reduce.*``, ``{name}.branch*``)."""
    if out_ch is None:
        out_ch = params[f"{name}.reduce.weight"].shape[0]
    return CDCM(name, x.shape[1], out_ch).forward(params, x)


def csam_forward(x, params, name="csam"):
    """Standalone CSAM on explicit weights (keys ``{name}.conv1.*``, ``{name}.conv2.*``)."""
    return CSAM(name, x.shape[1]).forward(params, x)
