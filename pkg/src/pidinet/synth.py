"""Synthetic edge-detection data: noisy shapes with multi-annotator truth."""
import numpy as np

from .errors import ParameterError
from .evaluate import thin_edges
from .train import Sample

SUPERSAMPLE = 4
NOISE_SIGMA = 0.05
MIN_CONTRAST = 0.2


def _ellipse(rng, size):
    cy, cx = rng.uniform(0.1, 0.9, 2) * size
    ry, rx = rng.uniform(0.08, 0.25, 2) * size
    th = rng.uniform(0, np.pi)
    c, s = np.cos(th), np.sin(th)

    def inside(yy, xx):
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return inside


def _polygon(rng, size):
    n = int(rng.integers(3, 7))
    cy, cx = rng.uniform(0.1, 0.9, 2) * size
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.1, 0.28, n) * size
    vy = cy + rad * np.sin(ang)
    vx = cx + rad * np.cos(ang)

    def inside(yy, xx):
        # even-odd rule over the star-shaped outline
        res = np.zeros(np.broadcast(yy, xx).shape, dtype=bool)
        for k in range(n):
            y0, x0, y1, x1 = vy[k], vx[k], vy[k - 1], vx[k - 1]
            if y0 == y1:
                continue
            cross = ((y0 > yy) != (y1 > yy)) & (xx < (x1 - x0) * (yy - y0) / (y1 - y0) + x0)
            res ^= cross
        return res
    return inside


def _gray(c):
    return float(np.dot(c, (0.299, 0.587, 0.114)))


def _contour_pixels(fine_label, size, ss):
    """Pixels crossed by a visible region border, thinned to one pixel width.

    A pixel is crossed when its supersamples do not all share one label. Each
    such pixel is owned by the front-most region it touches (-1 elsewhere).
    """
    blk = fine_label.reshape(size, ss, size, ss).transpose(0, 2, 1, 3).reshape(size, size, ss * ss)
    lo, hi = blk.min(axis=-1), blk.max(axis=-1)
    crossed = thin_edges(lo != hi)
    return np.where(crossed, hi, -1)


def _shift(mask, dy, dx):
    out = np.zeros_like(mask)
    h, w = mask.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        mask[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


_JITTER = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))
_JITTER_P = (0.5, 0.125, 0.125, 0.125, 0.125)


def render_sample(rng, size, annotators, name=""):
    n_shapes = int(rng.integers(2, 7))
    bg = rng.uniform(0, 1, 3)
    colors = [bg]
    shapes = []
    for _ in range(n_shapes):
        make = _ellipse if rng.random() < 0.5 else _polygon
        shapes.append(make(rng, size))
        while True:
            c = rng.uniform(0, 1, 3)
            if abs(_gray(c) - _gray(bg)) >= MIN_CONTRAST:
                break
        colors.append(c)
    colors = np.array(colors)

    ss = SUPERSAMPLE
    fine = (np.arange(size * ss) + 0.5) / ss
    fy, fx = np.meshgrid(fine, fine, indexing="ij")
    fine_label = np.zeros(fy.shape, dtype=np.int64)
    for k, inside in enumerate(shapes, start=1):
        fine_label[inside(fy, fx)] = k

    img = colors[fine_label].reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    img = img + rng.normal(0, NOISE_SIGMA, img.shape)
    img = np.clip(img, 0, 1).transpose(2, 0, 1)[None].astype(np.float32)

    owner = _contour_pixels(fine_label, size, ss)
    votes = np.zeros((size, size))
    for _ in range(annotators):
        marked = np.zeros((size, size), dtype=bool)
        for k in range(1, n_shapes + 1):
            dy, dx = _JITTER[rng.choice(len(_JITTER), p=_JITTER_P)]
            marked |= _shift(owner == k, dy, dx)
        votes += marked
    truth = (votes / annotators)[None, None].astype(np.float32)
    return Sample(img, truth, name)


def synth_dataset(n, size=64, annotators=5, seed=0):
    """``n`` samples of 2-6 anti-aliased ellipses/polygons with annotator-vote truth.

    The true contour is the thinned set of pixels that a region border
    passes through. Each simulated annotator traces every shape's share of it
    displaced by at most one pixel, so truth values are vote fractions.
    """
    if size < 32:
        raise ParameterError(f"size must be at least 32, got {size}")
    if annotators < 1:
        raise ParameterError(f"need at least one annotator, got {annotators}")
    return [render_sample(np.random.default_rng([seed, i]), size, annotators, f"synth{i:04d}")
            for i in range(n)]
