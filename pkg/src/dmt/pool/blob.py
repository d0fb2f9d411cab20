"""Versioned binary model format.

Layout (all little-endian)::

    b"DMTM" | u32 format_version | u32 kind_tag | u32 n_ints | u64 n_floats
    | u32 ints[n_ints] | f64 floats[n_floats]

The integer block holds structure (sizes, indices); the float block holds
every real-valued parameter, so round trips are bit-exact.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..detector import DetectorModel
from ..ert import CascadeLevel, ErtModel
from ..errors import BlobFormatError
from ..hog import HogConfig
from ..wba import AggregatedErtModel

MAGIC = b"DMTM"
FORMAT_VERSION = 1
KIND_TAGS = {"detector": 1, "ert": 2, "ert-aggregated": 3}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
_HEADER = struct.Struct("<4sIIIQ")


def content_id(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def model_kind(model) -> str:
    if isinstance(model, DetectorModel):
        return "detector"
    if isinstance(model, ErtModel):
        return "ert"
    if isinstance(model, AggregatedErtModel):
        return "ert-aggregated"
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_dimension(model) -> dict:
    """Compatibility field recorded in pool metadata."""
    if isinstance(model, DetectorModel):
        return {"window": model.window}
    return {"landmark_count": model.landmark_count}


# ----------------------------------------------------------------------- packing


def _pack_detector(m: DetectorModel):
    wy, wx, nf = m.weights.shape
    cfg = m.extractor_config
    ints = [m.window, wy, wx, nf, cfg.cell_size, cfg.scale_num, cfg.scale_den]
    floats = [np.array([m.bias, m.detection_threshold, cfg.truncation, cfg.epsilon]), m.weights.ravel()]
    return ints, floats


def _pack_ert(m: ErtModel):
    ints = [m.landmark_count, len(m.cascades)]
    floats = [m.init_shape.ravel()]
    for c in m.cascades:
        t, s = c.split_a.shape
        ints += [len(c.anchor_landmark), t, c.depth]
        ints += c.anchor_landmark.tolist() + c.split_a.ravel().tolist() + c.split_b.ravel().tolist()
        floats += [c.anchor_offset.ravel(), c.thresholds.ravel(), c.leaves.ravel()]
    return ints, floats


def _pack_aggregated(m: AggregatedErtModel):
    ints = [len(m.subdivisions), m.landmark_count]
    floats = [np.asarray(m.deviations, dtype=np.float64), m.init_shape.ravel()]
    for sub in m.subdivisions:
        si, sf = _pack_ert(sub)
        ints += [len(si), int(sum(len(f) for f in sf))] + si
        floats += sf
    return ints, floats


def serialize(model) -> bytes:
    kind = model_kind(model)
    ints, floats = {"detector": _pack_detector, "ert": _pack_ert,
                    "ert-aggregated": _pack_aggregated}[kind](model)
    int_arr = np.asarray(ints, dtype="<u4")
    float_arr = np.concatenate([np.asarray(f, dtype="<f8").ravel() for f in floats])
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, KIND_TAGS[kind], len(int_arr), len(float_arr))
    return header + int_arr.tobytes() + float_arr.tobytes()


# ----------------------------------------------------------------------- unpacking


class _Cursor:
    def __init__(self, arr, what):
        self.arr = arr
        self.pos = 0
        self.what = what

    def take(self, n):
        if n < 0 or self.pos + n > len(self.arr):
            raise BlobFormatError(f"truncated {self.what} block")
        out = self.arr[self.pos:self.pos + n]
        self.pos += n
        return out

    def one(self):
        return int(self.take(1)[0])

    def done(self):
        if self.pos != len(self.arr):
            raise BlobFormatError(f"{len(self.arr) - self.pos} trailing values in {self.what} block")


def read_header(blob: bytes):
    """``(kind, n_ints, n_floats)`` from the fixed header, validating magic and version."""
    if len(blob) < _HEADER.size:
        raise BlobFormatError("blob shorter than header")
    magic, version, tag, n_ints, n_floats = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BlobFormatError("bad magic")
    if version != FORMAT_VERSION:
        raise BlobFormatError(f"unsupported format version {version}")
    if tag not in TAG_KINDS:
        raise BlobFormatError(f"unknown kind tag {tag}")
    if len(blob) != _HEADER.size + 4 * n_ints + 8 * n_floats:
        raise BlobFormatError("blob length does not match header")
    return TAG_KINDS[tag], n_ints, n_floats


def _unpack_detector(ints, floats):
    window, wy, wx, nf, cell, num, den = (ints.one() for _ in range(7))
    bias, thr, trunc, eps = floats.take(4).tolist()
    weights = floats.take(wy * wx * nf).reshape(wy, wx, nf).copy()
    cfg = HogConfig(cell_size=cell, scale_num=num, scale_den=den, truncation=trunc, epsilon=eps)
    return DetectorModel(weights, bias, window, cfg, thr)


def _unpack_ert(ints, floats):
    n_lm, n_cascades = ints.one(), ints.one()
    init = floats.take(2 * n_lm).reshape(n_lm, 2).copy()
    levels = []
    for _ in range(n_cascades):
        p, t, depth = ints.one(), ints.one(), ints.one()
        if depth < 2:
            raise BlobFormatError(f"bad tree depth {depth}")
        n_splits = 2 ** (depth - 1) - 1
        anchors = ints.take(p).astype(np.intp)
        sa = ints.take(t * n_splits).astype(np.intp).reshape(t, n_splits)
        sb = ints.take(t * n_splits).astype(np.intp).reshape(t, n_splits)
        if (anchors >= n_lm).any() or (sa >= p).any() or (sb >= p).any():
            raise BlobFormatError("index out of range")
        offsets = floats.take(2 * p).reshape(p, 2).copy()
        thr = floats.take(t * n_splits).reshape(t, n_splits).copy()
        leaves = floats.take(t * (n_splits + 1) * n_lm * 2).reshape(t, n_splits + 1, n_lm, 2).copy()
        levels.append(CascadeLevel(anchors, offsets, sa, sb, thr, leaves))
    return ErtModel(init, levels)


def _unpack_aggregated(ints, floats):
    n_sub, n_lm = ints.one(), ints.one()
    deviations = floats.take(n_sub).tolist()
    init = floats.take(2 * n_lm).reshape(n_lm, 2).copy()
    subs = []
    for _ in range(n_sub):
        ni, nf = ints.one(), ints.one()
        si, sf = _Cursor(ints.take(ni), "int"), _Cursor(floats.take(nf), "float")
        subs.append(_unpack_ert(si, sf))
        si.done()
        sf.done()
    return AggregatedErtModel(subs, deviations, init)


def deserialize(blob: bytes):
    blob = bytes(blob)
    kind, n_ints, n_floats = read_header(blob)
    off = _HEADER.size
    ints = np.frombuffer(blob, dtype="<u4", count=n_ints, offset=off).astype(np.int64)
    floats = np.frombuffer(blob, dtype="<f8", count=n_floats, offset=off + 4 * n_ints).astype(np.float64)
    ic, fc = _Cursor(ints, "int"), _Cursor(floats, "float")
    model = {"detector": _unpack_detector, "ert": _unpack_ert,
             "ert-aggregated": _unpack_aggregated}[kind](ic, fc)
    ic.done()
    fc.done()
    return model


def save_model(model, path) -> bytes:
    blob = serialize(model)
    Path(path).write_bytes(blob)
    return blob


def load_model(path):
    return deserialize(Path(path).read_bytes())
