"""Annotator-robust loss, Adam, learning-rate schedule and the training loop."""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateMapWarning, NonFiniteGradientError, NonFiniteLossError, ParameterError

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-6
BASE_LR = 0.005


@dataclass
class LossConfig:
    lam: float = 1.1
    eta: float = 0.3

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"lambda must be positive, got {self.lam}")
        if not 0 <= self.eta <= 1:
            raise ParameterError(f"eta must lie in [0, 1], got {self.eta}")


@dataclass
class Sample:
    image: np.ndarray   # (1, 3, H, W) in [0, 1]
    truth: np.ndarray   # (1, 1, H, W), fraction of annotators marking each pixel
    name: str = ""

    def __post_init__(self):
        if self.image.shape[2:] != self.truth.shape[2:]:
            raise ParameterError(
                f"image {self.image.shape} and truth {self.truth.shape} differ spatially")


def robust_edge_loss(p, y, cfg=LossConfig()):
    """Class-balanced cross-entropy that ignores weakly annotated pixels.

    Per pixel: -alpha*log(1-p) where y == 0, 0 where 0 < y < eta, and
    -beta*log(p) where y >= eta. beta is the share of negatives among the
    pixels kept for this map and alpha = lambda * (1 - beta). Each image in
    the batch is its own map. Returns (summed loss, d loss / d p).
    """
    if p.shape != y.shape:
        raise ParameterError(f"prediction {p.shape} and truth {y.shape} differ")
    p64 = p.astype(np.float64)
    pc = np.clip(p64, CLAMP_EPS, 1 - CLAMP_EPS)
    inside = (p64 > CLAMP_EPS) & (p64 < 1 - CLAMP_EPS)
    neg = y == 0
    pos = ~neg & (y >= cfg.eta)

    loss = 0.0
    grad = np.zeros_like(p64)
    for n in range(p.shape[0]):
        ng, ps = neg[n], pos[n]
        n_neg, n_pos = int(ng.sum()), int(ps.sum())
        if n_neg + n_pos == 0:
            warnings.warn("edge map has no usable pixels; loss set to 0", DegenerateMapWarning)
            continue
        beta = n_neg / (n_neg + n_pos)
        alpha = cfg.lam * (1 - beta)
        pn = pc[n]
        loss -= alpha * np.log1p(-pn[ng]).sum() + beta * np.log(pn[ps]).sum()
        g = grad[n]
        g[ng] = alpha / (1 - pn[ng])
        g[ps] = -beta / pn[ps]
    grad *= inside
    return float(loss), grad.astype(p.dtype)


def deep_supervision_loss(side, fused, y, cfg=LossConfig()):
    """Sum of the loss over every side map and the fused map."""
    total = 0.0
    grad_side = []
    for s in side:
        l, g = robust_edge_loss(s, y, cfg)
        total += l
        grad_side.append(g)
    l, grad_fused = robust_edge_loss(fused, y, cfg)
    return total + l, grad_side, grad_fused


@dataclass
class AdamState:
    lr: float = BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update applied to ``params`` in place.

    Checks every gradient before touching any parameter, so a rejected step
    leaves the model exactly as it was.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ParameterError(f"gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            continue
        g = g.astype(np.float64)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros(theta.shape)
            state.v[k] = np.zeros(theta.shape)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[k] = (theta - update).astype(theta.dtype)
    return params


def lr_at(epoch, total_epochs=14, with_extra_data=False, base_lr=BASE_LR):
    """Multi-step schedule: x0.1 at epochs 8 and 12, or 10 and 16 with extra data."""
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    milestones = (10, 16) if with_extra_data else (8, 12)
    return base_lr * 0.1 ** sum(epoch >= m for m in milestones)


# augmentation -------------------------------------------------------------

SCALES = (0.5, 1.0, 1.5)


def _nearest_resize(x, oh, ow):
    h, w = x.shape[2:]
    ri = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    ci = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return x[:, :, ri][:, :, :, ci]


def apply_augment(s: Sample, flip=False, scale=1.0, rot=0, crop=None, origin=None):
    """Deterministic transform: scale, rotate by rot*90 degrees, flip, crop.

    ``origin`` is the (row, col) of the crop window; None centers it.
    """
    img, gt = s.image, s.truth
    if scale != 1.0:
        h, w = img.shape[2:]
        oh, ow = max(1, round(h * scale)), max(1, round(w * scale))
        img = np.clip(T.bilinear_upsample(img, oh, ow), 0, 1)
        gt = _nearest_resize(gt, oh, ow)
    if rot % 4:
        img = np.rot90(img, rot, axes=(2, 3))
        gt = np.rot90(gt, rot, axes=(2, 3))
    if flip:
        img = img[:, :, :, ::-1]
        gt = gt[:, :, :, ::-1]
    if crop is not None:
        ch, cw = (crop, crop) if np.isscalar(crop) else crop
        h, w = img.shape[2:]
        if ch > h or cw > w:
            raise ParameterError(f"crop {ch}x{cw} larger than image {h}x{w}")
        r0, c0 = origin if origin is not None else ((h - ch) // 2, (w - cw) // 2)
        img = img[:, :, r0:r0 + ch, c0:c0 + cw]
        gt = gt[:, :, r0:r0 + ch, c0:c0 + cw]
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(gt), s.name)


def augment(s: Sample, rng, crop=None, scales=SCALES):
    """Random flip, scale, quarter-turn rotation and crop.

    Scales whose result would be smaller than the crop are redrawn.
    """
    h, w = s.image.shape[2:]
    ch, cw = (None, None) if crop is None else ((crop, crop) if np.isscalar(crop) else crop)
    usable = [sc for sc in scales
              if ch is None or (round(h * sc) >= ch and round(w * sc) >= cw
                                and round(h * sc) >= cw and round(w * sc) >= ch)]
    if not usable:
        raise ParameterError(f"crop {crop} larger than the image at every scale")
    flip = bool(rng.integers(2))
    scale = float(usable[rng.integers(len(usable))])
    rot = int(rng.integers(4))
    origin = None
    if ch is not None:
        sh, sw = round(h * scale), round(w * scale)
        if rot % 2:
            sh, sw = sw, sh
        origin = (int(rng.integers(sh - ch + 1)), int(rng.integers(sw - cw + 1)))
    return apply_augment(s, flip, scale, rot, crop, origin)


# training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 14
    base_lr: float = BASE_LR
    schedule_epochs: int = 14
    with_extra_data: bool = False
    augment: bool = True
    crop: object = None


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float


def train_loop(model, data, loss_cfg=LossConfig(), train_cfg=TrainConfig(), seed=0,
               state=None, on_epoch=None):
    """Train ``model`` in place with batch size 1 and deep supervision.

    The visiting order of each epoch and every augmentation draw come from
    RNG streams keyed by (seed, epoch[, sample]), so runs are reproducible.
    Returns (model, list of EpochLog).
    """
    if not data:
        raise ParameterError("training data is empty")
    state = state or AdamState(lr=train_cfg.base_lr)
    history = []
    total = max(train_cfg.schedule_epochs, train_cfg.epochs)
    for epoch in range(train_cfg.epochs):
        state.lr = lr_at(epoch, total, train_cfg.with_extra_data, train_cfg.base_lr)
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        losses = []
        for i in order:
            s = data[i]
            if train_cfg.augment:
                s = augment(s, np.random.default_rng([seed, epoch, int(i)]), train_cfg.crop)
            x = s.image.astype(model.params["init.weight"].dtype)
            side, fused, tape = model.forward_train(x)
            loss, g_side, g_fused = deep_supervision_loss(side, fused, s.truth, loss_cfg)
            if not np.isfinite(loss):
                err = NonFiniteLossError(f"non-finite loss at epoch {epoch}, sample {i}")
                err.history = history
                raise err
            grads = model.backward(tape, g_side, g_fused)
            adam_step(state, model.params, grads)
            losses.append(loss)
        entry = EpochLog(epoch, float(np.mean(losses)), state.lr)
        history.append(entry)
        log.info("epoch %d  loss %.4f  lr %.2e", epoch, entry.mean_loss, entry.lr)
        if on_epoch is not None:
            on_epoch(entry)
    return model, history
