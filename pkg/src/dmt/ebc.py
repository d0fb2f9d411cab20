"""Eyelid-closure traces from landmark shapes.

Landmark numbers are 1-based as in the 68-point layout; the eye used is
LM43..LM48.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateEyeError, FlatTraceError, ValidationError


@dataclass
class BlinkSample:
    time: float
    ear: float
    closure: float
    held: bool = False  # EAR carried over from another frame (no detection)


@dataclass
class BlinkTrace:
    samples: list = field(default_factory=list)
    min_ear: float = 0.0
    max_ear: float = 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "ear", "closure", "flag"])
            for s in self.samples:
                w.writerow([repr(s.time), repr(s.ear), repr(s.closure), int(s.held)])


def _lm(shape, n):
    return np.asarray(shape[n - 1], dtype=np.float64)


def ear(shape) -> float:
    """(|LM44-LM48| + |LM45-LM47|) / (2 |LM43-LM46|)."""
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape[0] < 48:
        raise ValidationError(f"EAR needs 48+ landmarks, got {shape.shape[0]}")
    horizontal = float(np.linalg.norm(_lm(shape, 43) - _lm(shape, 46)))
    if horizontal == 0.0:
        raise DegenerateEyeError("eye corners LM43 and LM46 coincide")
    v1 = float(np.linalg.norm(_lm(shape, 44) - _lm(shape, 48)))
    v2 = float(np.linalg.norm(_lm(shape, 45) - _lm(shape, 47)))
    return (v1 + v2) / (2.0 * horizontal)


def closure_percent(value, min_ear, max_ear) -> float:
    # 100/MAX_EAR rather than 100/(MAX-MIN): a trace with MIN_EAR > 0 never reaches 0 %
    return 100.0 - (value - min_ear) * (100.0 / max_ear)


def normalize_trace(ears, held=None) -> BlinkTrace:
    """``ears`` is a sequence of ``(time, ear)``; ``held`` optionally flags carried values."""
    ears = [(float(t), float(e)) for t, e in ears]
    if len(ears) < 2:
        raise ValidationError("a trace needs at least two samples")
    values = [e for _, e in ears]
    lo, hi = min(values), max(values)
    if not hi > 0:
        raise FlatTraceError("maximum EAR is not positive")
    held = list(held) if held is not None else [False] * len(ears)
    samples = [BlinkSample(t, e, closure_percent(e, lo, hi), bool(h))
               for (t, e), h in zip(ears, held)]
    return BlinkTrace(samples, lo, hi)


def trace_sequence(frames, times, detector_models, shape_model) -> BlinkTrace:
    """Detect, localize and normalise per frame.

    The highest-scoring detection is the face. Frames without one take the
    previous frame's EAR (the first detected EAR for leading frames) and
    are flagged.
    """
    from .detector import detect
    from .wba import localize_any

    frames = list(frames)
    times = list(times)
    if len(frames) < 2:
        raise ValidationError("a trace needs at least two frames")
    if len(times) != len(frames):
        raise ValidationError("one timestamp per frame is required")
    values = []
    for img in frames:
        img = np.asarray(img, dtype=np.float64)
        dets = detect(img, detector_models)
        if not dets:
            values.append(None)
            continue
        x, y, w, h = dets[0].box
        ih, iw = img.shape
        box = (max(x, 0.0), max(y, 0.0), min(x + w, iw) - max(x, 0.0), min(y + h, ih) - max(y, 0.0))
        values.append(ear(localize_any(img, box, shape_model)))
    if all(v is None for v in values):
        raise ValidationError("no face detected in any frame")
    first = next(v for v in values if v is not None)
    ears, held, last = [], [], first
    for t, v in zip(times, values):
        if v is None:
            held.append(True)
        else:
            held.append(False)
            last = v
        ears.append((t, last))
    return normalize_trace(ears, held)


def read_frame_manifest(directory):
    """Load ``manifest.csv`` (columns ``file,time``) and its PNG frames, in time order."""
    from .datasets import load_png

    directory = Path(directory)
    with open(directory / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: float(r["time"]))
    frames = [load_png(directory / r["file"]) for r in rows]
    times = [float(r["time"]) for r in rows]
    return frames, times


def write_frame_manifest(directory, frames, times, prefix="frame"):
    from .datasets import save_png

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "time"])
        for i, (img, t) in enumerate(zip(frames, times)):
            name = f"{prefix}_{i:05d}.png"
            save_png(directory / name, img)
            w.writerow([name, repr(float(t))])
    return directory / "manifest.csv"

