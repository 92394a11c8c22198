"""Boundary F-measure: thinning, tolerant matching, ODS / OIS sweeps."""
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError

# neighbour bit layout (bit k set when that neighbour is on):
#   NW=3  N=2  NE=1
#   W=4   .    E=0
#   SW=5  S=6  SE=7
_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def _guo_hall_luts():
    codes = np.arange(256)
    bits = [(codes >> k) & 1 for k in range(8)]
    e, ne, n, nw, w, sw, s, se = (b.astype(bool) for b in bits)
    # C(p): number of distinct 8-connected components among the neighbours
    c = sum(((~a) & (b | d)).astype(int) for a, b, d in ((e, ne, n), (n, nw, w), (w, sw, s), (s, se, e)))
    n1 = (e | ne).astype(int) + (n | nw) + (w | sw) + (s | se)
    n2 = (ne | n).astype(int) + (nw | w) + (sw | s) + (se | e)
    nn = np.minimum(n1, n2)
    removable = (c == 1) & (nn >= 2) & (nn <= 3)
    first = removable & ~((n | ne | ~se) & e)
    second = removable & ~((s | sw | ~nw) & w)
    return first, second


_LUT_FIRST, _LUT_SECOND = _guo_hall_luts()


def _neighbour_codes(img):
    h, w = img.shape
    p = np.pad(img, 1).astype(np.uint8)
    code = np.zeros((h, w), dtype=np.uint8)
    for k, (dy, dx) in enumerate(_OFFSETS):
        code |= p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w] << k
    return code


def thin_edges(binary):
    """Guo-Hall two-subiteration thinning down to one-pixel-wide curves."""
    img = np.asarray(binary).astype(bool).copy()
    if img.ndim != 2:
        raise ParameterError(f"thin_edges expects a 2-D map, got shape {img.shape}")
    while True:
        changed = False
        for lut in (_LUT_FIRST, _LUT_SECOND):
            kill = lut[_neighbour_codes(img)] & img
            if kill.any():
                img[kill] = False
                changed = True
        if not changed:
            return img


def match_edges(pred, truth, radius):
    """One-to-one matching of edge pixels within Euclidean distance ``radius``.

    Pairs are taken closest-first; the greedy result is then extended along
    augmenting paths so the number of matches is always maximal.
    Returns (tp, fp, fn).
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {truth.shape}")
    n_pred, n_truth = int(pred.sum()), int(truth.sum())
    if n_pred == 0 or n_truth == 0:
        return 0, n_pred, n_truth
    if radius < 1.0:
        tp = int((pred & truth).sum())
        return tp, n_pred - tp, n_truth - tp

    pp = np.argwhere(pred)
    tt = np.argwhere(truth)
    dist = cKDTree(pp).sparse_distance_matrix(cKDTree(tt), radius, output_type="ndarray")
    i_all, j_all, d_all = dist["i"], dist["j"], dist["v"]
    order = np.lexsort((j_all, i_all, d_all))
    i_all, j_all = i_all[order], j_all[order]
    adj = [[] for _ in range(n_pred)]
    for i, j in zip(i_all.tolist(), j_all.tolist()):
        adj[i].append(j)

    match_p = [-1] * n_pred
    match_t = [-1] * n_truth
    for i, j in zip(i_all.tolist(), j_all.tolist()):
        if match_p[i] < 0 and match_t[j] < 0:
            match_p[i] = j
            match_t[j] = i

    for root in range(n_pred):
        if match_p[root] >= 0 or not adj[root]:
            continue
        # BFS over alternating paths from an unmatched prediction
        parent = {}
        queue = deque([root])
        end = -1
        while queue and end < 0:
            u = queue.popleft()
            for j in adj[u]:
                if j in parent:
                    continue
                parent[j] = u
                if match_t[j] < 0:
                    end = j
                    break
                queue.append(match_t[j])
        while end >= 0:
            u = parent[end]
            prev = match_p[u]
            match_p[u] = end
            match_t[end] = u
            end = prev

    tp = sum(1 for j in match_p if j >= 0)
    return tp, n_pred - tp, n_truth - tp


@dataclass
class EvalConfig:
    n_thresholds: int = 33
    match_radius_frac: float = 0.0075
    thin: bool = True
    eta: float = 0.3
    quantile: bool = False

    def __post_init__(self):
        if self.n_thresholds < 2:
            raise ParameterError(f"need at least 2 thresholds, got {self.n_thresholds}")
        if not self.match_radius_frac > 0:
            raise ParameterError("match_radius_frac must be positive")


@dataclass
class PrPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float = field(init=False)
    recall: float = field(init=False)
    f: float = field(init=False)

    def __post_init__(self):
        self.precision, self.recall, self.f = f_measure(self.tp, self.fp, self.fn)


@dataclass
class EvalReport:
    ods: float
    ois: float
    ods_threshold: float
    curve: list
    image_best: list

    def __iter__(self):
        return iter((self.ods, self.ois, self.curve))


def f_measure(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def thresholds_for(preds, cfg):
    n = cfg.n_thresholds
    if cfg.quantile:
        pooled = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in preds])
        q = np.arange(1, n + 1) / (n + 1)
        return np.quantile(pooled, q, method="lower")
    return np.arange(1, n + 1) / (n + 1)


def _binarize_truth(t, eta):
    t = np.asarray(t)
    if t.dtype == bool:
        return t
    return t >= eta if eta > 0 else t > 0


def image_counts(pred, truth, thresholds, cfg):
    """(tp, fp, fn) per threshold for one image."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = _binarize_truth(truth, cfg.eta)
    if pred.shape != gt.shape:
        raise ParameterError(f"prediction {pred.shape} and truth {gt.shape} differ")
    radius = cfg.match_radius_frac * float(np.hypot(*pred.shape))
    out = []
    for t in thresholds:
        b = pred >= t
        if cfg.thin:
            b = thin_edges(b)
        out.append(match_edges(b, gt, radius))
    return np.array(out, dtype=np.int64).reshape(len(thresholds), 3)


def _squeeze(m):
    m = np.asarray(m)
    while m.ndim > 2:
        m = m[0]
    return m


def ods_ois(preds, truths, cfg=EvalConfig()):
    """Dataset-best (ODS) and mean image-best (OIS) F-measure over a threshold sweep."""
    if len(preds) == 0:
        raise ParameterError("no images to evaluate")
    if len(preds) != len(truths):
        raise ParameterError(f"{len(preds)} predictions but {len(truths)} truths")
    preds = [_squeeze(p) for p in preds]
    truths = [_squeeze(t) for t in truths]
    ths = thresholds_for(preds, cfg)
    per_image = [image_counts(p, t, ths, cfg) for p, t in zip(preds, truths)]
    total = np.sum(per_image, axis=0)
    curve = [PrPoint(float(t), *map(int, c)) for t, c in zip(ths, total)]
    best = max(range(len(curve)), key=lambda k: curve[k].f)
    image_best = [max(f_measure(*c)[2] for c in counts) for counts in per_image]
    return EvalReport(curve[best].f, float(np.mean(image_best)), curve[best].threshold,
                      curve, image_best)
