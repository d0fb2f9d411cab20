"""Deterministic synthetic corpora standing in for private face datasets.

Every image is drawn from its own generator seeded by ``(seed, index)``, so a
corpus prefix does not depend on the requested count. Pixel values are
integral so PNG round-trips are lossless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .datasets import AnnotatedDataset, Box, ImageRecord
from .hog import resize_bilinear


def _background(rng, h, w, base=30.0, texture=20.0, grain=6.0):
    coarse = rng.uniform(0, 1, (max(h // 16, 2), max(w // 16, 2)))
    img = base + texture * resize_bilinear(coarse, h, w) + rng.normal(0, grain, (h, w))
    return img


def _finish(img):
    return np.clip(np.rint(img), 0, 255).astype(np.float64)


def _draw_polygon(img, points, value, outline=None):
    mask = Image.new("L", (img.shape[1], img.shape[0]), 0)
    ImageDraw.Draw(mask).polygon([tuple(map(float, p)) for p in points], fill=255, outline=outline)
    m = np.asarray(mask) > 0
    img[m] = value
    return m


def _rect_free(rect, others):
    x, y, w, h = rect
    for ox, oy, ow, oh in others:
        if x < ox + ow and ox < x + w and y < oy + oh and oy < y + h:
            return False
    return True


# ----------------------------------------------------------------------- detector


def generate_detector_corpus(count=600, seed=7, size=160, min_side=72, max_side=104,
                             empty_fraction=0.1, max_distractors=2, clutter=6):
    """Bright squares (annotated) with unannotated diamond distractors on textured noise."""
    ds = AnnotatedDataset(name=f"synth-detector-s{seed}")
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img = _background(rng, size, size)
        occupied = []
        boxes = []
        if rng.uniform() >= empty_fraction:
            side = int(rng.integers(min_side, max_side + 1))
            x = int(rng.integers(0, size - side + 1))
            y = int(rng.integers(0, size - side + 1))
            value = rng.uniform(170, 240)
            img[y:y + side, x:x + side] = value + rng.normal(0, 4, (side, side))
            boxes.append(Box(x, y, side, side))
            occupied.append((x, y, side, side))
        for _ in range(int(rng.integers(0, max_distractors + 1))):
            side = int(rng.integers(min_side - 16, max_side + 1))
            for _attempt in range(30):
                x = int(rng.integers(0, size - side + 1))
                y = int(rng.integers(0, size - side + 1))
                if _rect_free((x, y, side, side), occupied):
                    break
            else:
                continue
            occupied.append((x, y, side, side))
            c = side / 2
            pts = [(x + c, y), (x + side - 1, y + c), (x + c, y + side - 1), (x, y + c)]
            _draw_polygon(img, pts, rng.uniform(170, 240))
        for _ in range(clutter):
            cw, ch = (int(v) for v in rng.integers(2, 14, 2))
            cx, cy = (int(v) for v in rng.integers(0, size - 14, 2))
            img[cy:cy + ch, cx:cx + cw] = rng.uniform(60, 250)
        ds.images.append(ImageRecord(f"det_{i:05d}.png", boxes, _finish(img)))
    return ds


# ----------------------------------------------------------------------- landmarks


def square_template(n_landmarks=8, lo=0.25, hi=0.75) -> np.ndarray:
    """Points evenly spaced along a square outline, clockwise from the top-left corner."""
    perimeter = 4.0
    pts = []
    for k in range(n_landmarks):
        t = k * perimeter / n_landmarks
        side, f = int(t), t - int(t)
        u = [(f, 0.0), (1.0, f), (1.0 - f, 1.0), (0.0, 1.0 - f)][side]
        pts.append((lo + (hi - lo) * u[0], lo + (hi - lo) * u[1]))
    return np.array(pts)


def generate_landmark_corpus(count=300, seed=7, size=64, n_landmarks=8, warp=1.0,
                             box_margin=8):
    """Filled, warped square outlines with ``n_landmarks`` annotated vertices.

    ``warp`` scales every geometric perturbation (global scale, rotation,
    shift and per-vertex noise); ``warp=0`` reproduces the template exactly.
    """
    template = square_template(n_landmarks)
    side = size - 2 * box_margin
    ds = AnnotatedDataset(name=f"synth-landmarks-s{seed}")
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scale = 1.0 + warp * rng.uniform(-0.2, 0.2)
        angle = warp * rng.uniform(-0.25, 0.25)
        shift = warp * rng.uniform(-0.08, 0.08, 2)
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]]) * scale
        shape = (template - 0.5) @ rot.T + 0.5 + shift
        shape = shape + warp * rng.uniform(-0.04, 0.04, shape.shape)
        pix = box_margin + shape * side
        img = _background(rng, size, size, base=50.0, texture=30.0, grain=5.0)
        _draw_polygon(img, pix, rng.uniform(170, 220))
        parts = {f"{k:02d}": (float(px), float(py)) for k, (px, py) in enumerate(pix)}
        box = Box(box_margin, box_margin, side, side, parts=parts)
        ds.images.append(ImageRecord(f"lm_{i:05d}.png", [box], _finish(img)))
    return ds


# ----------------------------------------------------------------------- blink


EYE_OPEN_HALF_HEIGHT = 0.05


def face_template_68(closure=0.0) -> np.ndarray:
    """68-point face layout in unit face-box coordinates.

    Both eyes open to a half-height of 0.05 (EAR 0.5) and close linearly
    with ``closure`` percent.
    """
    pts = np.zeros((68, 2))
    for k in range(17):  # jaw
        a = math.pi * (1.0 - k / 16.0)
        pts[k] = (0.5 + 0.42 * math.cos(a), 0.55 + 0.38 * math.sin(a))
    for k in range(5):  # brows
        pts[17 + k] = (0.18 + 0.05 * k, 0.26 - 0.02 * (2 - abs(k - 2)))
        pts[22 + k] = (0.62 + 0.05 * k, 0.26 - 0.02 * (2 - abs(k - 2)))
    for k in range(4):  # nose bridge
        pts[27 + k] = (0.5, 0.38 + 0.06 * k)
    for k in range(5):  # nostrils
        pts[31 + k] = (0.42 + 0.04 * k, 0.62)
    h = EYE_OPEN_HALF_HEIGHT * (1.0 - closure / 100.0)
    for base, cx in ((36, 0.30), (42, 0.70)):
        # corner, two upper, corner, two lower: inner/outer order follows the 68-point scheme
        xs = (-0.1, -0.04, 0.04, 0.1, 0.04, -0.04)
        ys = (0.0, -h, -h, 0.0, h, h)
        for k in range(6):
            pts[base + k] = (cx + xs[k], 0.40 + ys[k])
    for k in range(12):  # outer lip
        a = 2 * math.pi * k / 12
        pts[48 + k] = (0.5 - 0.16 * math.cos(a), 0.78 - 0.06 * math.sin(a))
    for k in range(8):  # inner lip
        a = 2 * math.pi * k / 8
        pts[60 + k] = (0.5 - 0.1 * math.cos(a), 0.78 - 0.025 * math.sin(a))
    return pts


@dataclass
class BlinkSequence:
    frames: list
    times: list
    closures: list
    dataset: AnnotatedDataset = field(default_factory=AnnotatedDataset)


def generate_blink_sequence(closures, seed=7, size=128, fps=30.0, jitter=4, face_side=(88, 104)):
    """One frame per scripted closure value (percent) with ground-truth 68-point shapes."""
    frames, times = [], []
    ds = AnnotatedDataset(name=f"synth-blink-s{seed}")
    for i, closure in enumerate(closures):
        rng = np.random.default_rng([seed, i])
        side = int(rng.integers(face_side[0], face_side[1] + 1))
        margin = (size - side) // 2
        x = margin + int(rng.integers(-jitter, jitter + 1))
        y = margin + int(rng.integers(-jitter, jitter + 1))
        img = _background(rng, size, size)
        img[y:y + side, x:x + side] = rng.uniform(185, 215) + rng.normal(0, 3, (side, side))
        shape = x + face_template_68(float(closure)) * np.array([side, side])
        shape[:, 1] += y - x
        for base in (36, 42):
            eye = shape[base:base + 6]
            mask = Image.new("L", (size, size), 0)
            ImageDraw.Draw(mask).polygon([tuple(p) for p in eye], fill=255, outline=255)
            img[np.asarray(mask) > 0] = 35.0
        for seg in (range(17, 22), range(22, 27)):
            mask = Image.new("L", (size, size), 0)
            ImageDraw.Draw(mask).line([tuple(shape[k]) for k in seg], fill=255, width=3)
            img[np.asarray(mask) > 0] = 60.0
        _draw_polygon(img, shape[48:60], 90.0)
        img = _finish(img)
        frames.append(img)
        times.append(i / fps)
        parts = {f"{k:02d}": (float(px), float(py)) for k, (px, py) in enumerate(shape)}
        ds.images.append(ImageRecord(f"blink_{i:05d}.png", [Box(x, y, side, side, parts=parts)], img))
    return BlinkSequence(frames, times, list(closures), ds)


def synth_generate(kind: str, params: dict | None = None, seed: int = 7):
    """Dispatch to the detector, landmarks or blink generator."""
    params = dict(params or {})
    if kind == "detector":
        return generate_detector_corpus(seed=seed, **params)
    if kind == "landmarks":
        return generate_landmark_corpus(seed=seed, **params)
    if kind == "blink":
        closures = params.pop("closures", [0, 100, 0])
        return generate_blink_sequence(closures, seed=seed, **params)
    raise ValueError(f"unknown synthetic kind {kind!r}")
