"""Model files, Netpbm images, dataset directories and CSV reports.

Model container layout (all integers little-endian)::

    b"PDCN" | u32 version | u32 header_len | header (UTF-8 JSON) | payload

The payload is raw float32 (little-endian) tensors concatenated in manifest
order; each manifest entry gives name, shape and byte offset.
"""
import csv
import json
import logging
import struct
import warnings
from pathlib import Path

import numpy as np

from .config import ArchConfig, parse_config
from .errors import (ConfigError, DataError, ModelConsistencyError, ModelCorruptionError,
                     ModelFormatError)
from .model import PiDiNetModel
from .train import Sample

log = logging.getLogger(__name__)

MAGIC = b"PDCN"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


# model files --------------------------------------------------------------

def _header(model):
    cfg = model.config
    manifest = []
    offset = 0
    for name, arr in model.params.items():
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "config": cfg.text,
        "base_channels": cfg.base_channels,
        "cdcm_channels": cfg.cdcm_channels,
        "use_csam": cfg.use_csam,
        "use_cdcm": cfg.use_cdcm,
        "stages": [list(s) for s in cfg.stages],
        "seed": model.seed,
        "converted": model.converted,
        "tensors": manifest,
    }
    return header, offset


def model_to_bytes(model):
    header, _ = _header(model)
    hb = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in model.params.values())
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + payload


def save_model(model, path):
    Path(path).write_bytes(model_to_bytes(model))


def model_from_bytes(buf):
    if len(buf) < _PREFIX.size:
        raise ModelCorruptionError(f"file too short for a header ({len(buf)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise ModelCorruptionError(f"header truncated: need {start} bytes, have {len(buf)}")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
        stages = tuple(tuple(s) for s in header["stages"])
        blocks = parse_config(header["config"], length=sum(n for n, _ in stages))
        cfg = ArchConfig(blocks, header["base_channels"], header["cdcm_channels"],
                         header["use_csam"], header["use_cdcm"], stages)
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise ModelFormatError(f"unreadable header: {e}") from e

    payload = memoryview(buf)[start:]
    expected = 0
    for entry in manifest:
        if entry["offset"] != expected:
            raise ModelConsistencyError(
                f"tensor {entry['name']!r} at offset {entry['offset']}, expected {expected}")
        expected += int(np.prod(entry["shape"], dtype=np.int64)) * 4
    if len(payload) != expected:
        raise ModelCorruptionError(
            f"payload is {len(payload)} bytes, manifest expects {expected}")

    model = PiDiNetModel(cfg, params={}, seed=header.get("seed", 0),
                         converted=bool(header.get("converted", False)))
    want = {}
    for c in model.convs():
        want[c.name + ".weight"] = c.weight_shape
        if c.bias:
            want[c.name + ".bias"] = (c.out_ch,)
    got = {e["name"]: tuple(e["shape"]) for e in manifest}
    if got != want:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        bad = sorted(k for k in set(got) & set(want) if got[k] != want[k])
        raise ModelConsistencyError(
            f"manifest does not match architecture (missing={missing[:3]}, "
            f"unexpected={extra[:3]}, wrong shape={bad[:3]})")
    params = {}
    for e in manifest:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        params[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    model.params = params
    return model


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())


# Netpbm --------------------------------------------------------------------

def _read_header_tokens(data, count):
    """Return ``count`` whitespace-separated header tokens and the data offset."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise DataError("truncated Netpbm header")
        tokens.append(data[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pnm(path):
    """Decode a binary PGM (P5) or PPM (P6). Returns (uint array, maxval).

    Grayscale arrays are (H, W); color arrays are (H, W, 3).
    """
    data = Path(path).read_bytes()
    tokens, off = _read_header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported Netpbm type {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed header") from None
    if not 0 < maxval < 65536 or w < 1 or h < 1:
        raise DataError(f"{path}: invalid size or maxval")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * ch
    if len(data) - off < count * dtype.itemsize:
        raise DataError(f"{path}: raster truncated")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).astype(np.uint16)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)), maxval


def _quantize(x, maxval):
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * maxval)


def write_pgm(path, x, bits=16):
    """Write a [0, 1] map of shape (H, W) as 8- or 16-bit binary PGM."""
    x = np.asarray(x)
    while x.ndim > 2:
        x = x[0]
    maxval = 65535 if bits == 16 else 255
    q = _quantize(x, maxval).astype(">u2" if bits == 16 else "u1")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + q.tobytes())


def write_ppm(path, img, bits=8):
    """Write a (3, H, W) or (1, 3, H, W) image in [0, 1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim == 4:
        img = img[0]
    maxval = 65535 if bits == 16 else 255
    q = _quantize(img.transpose(1, 2, 0), maxval).astype(">u2" if bits == 16 else "u1")
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n{maxval}\n".encode() + q.tobytes())


def load_image(path):
    """Read a PPM (or PGM, replicated to RGB) as a (1, 3, H, W) float32 array."""
    arr, maxval = read_pnm(path)
    x = arr.astype(np.float32) / maxval
    if x.ndim == 2:
        x = np.repeat(x[:, :, None], 3, axis=2)
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])


def load_map(path):
    """Read a PGM as a (1, 1, H, W) float32 map in [0, 1]."""
    arr, maxval = read_pnm(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a grayscale PGM")
    return (arr.astype(np.float32) / maxval)[None, None]


# datasets -----------------------------------------------------------------

TRUTH_SUFFIX = ".gt.pgm"


def save_dataset(directory, samples):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(d / f"{s.name}.ppm", s.image)
        write_pgm(d / f"{s.name}{TRUTH_SUFFIX}", s.truth)


def load_dataset(directory):
    """Pair ``NAME.ppm`` with ``NAME.gt.pgm``; samples come back sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    images = {p.name[:-4]: p for p in d.glob("*.ppm")}
    truths = {p.name[:-len(TRUTH_SUFFIX)]: p for p in d.glob(f"*{TRUTH_SUFFIX}")}
    for stem in sorted(set(images) ^ set(truths)):
        warnings.warn(f"skipping unpaired sample {stem!r} in {d}")
    stems = sorted(set(images) & set(truths))
    if not stems:
        raise DataError(f"no NAME.ppm / NAME{TRUTH_SUFFIX} pairs in {d}")
    return [Sample(load_image(images[s]), load_map(truths[s]), s) for s in stems]


# reports ------------------------------------------------------------------

def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr"])
        for e in history:
            w.writerow([e.epoch, repr(e.mean_loss), repr(e.lr)])


def write_pr_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall", "f"])
        for p in curve:
            w.writerow([f"{p.threshold:.6f}", f"{p.precision:.6f}", f"{p.recall:.6f}", f"{p.f:.6f}"])
