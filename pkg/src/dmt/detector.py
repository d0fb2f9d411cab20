"""Sliding-window linear classifier over HOG feature images.

A model is a ``(10, 10, 31)`` weight block plus a bias; the window score at
cell ``(y, x)`` is ``sum(weights * features[y:y+10, x:x+10]) - bias``. Window
scores above the model's threshold become detections, which are mapped back
to original-image pixels and pruned with non-maximum suppression.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import hog
from .errors import IncompatibleModelsError, TrainingDataError

log = logging.getLogger(__name__)

WINDOW_CELLS = 10
NMS_OVERLAP = 0.5
MATCH_OVERLAP = 0.5


@dataclass
class DetectorModel:
    weights: np.ndarray  # (cells_y, cells_x, 31)
    bias: float = 0.0
    window: int = 80
    extractor_config: hog.HogConfig = field(default_factory=hog.HogConfig)
    detection_threshold: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.isfinite(self.weights).all():
            raise ValueError("non-finite detector weights")

    @property
    def window_cells(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]


@dataclass(frozen=True)
class Detection:
    box: tuple  # (x, y, w, h) in original-image pixels
    score: float
    model_index: int = 0


@dataclass
class DetectorTrainParams:
    c: float = 5.0
    epsilon: float = 0.01
    target_size: int = 80
    upsample: int = 0
    seed: int = 0
    mining_rounds: int = 2
    mining_threshold: float = -0.5
    negatives_per_image: int = 10
    mined_per_image: int = 10
    max_epochs: int = 1000

    def __post_init__(self):
        if self.c <= 0 or self.epsilon <= 0:
            raise ValueError("c and epsilon must be positive")
        if self.upsample != 0:
            raise ValueError("only upsample=0 is supported")


@dataclass
class EvaluationReport:
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    recall_undefined: bool = False
    precision_undefined: bool = False


def report_from_counts(tp: int, fp: int, fn: int) -> EvaluationReport:
    recall_undef = tp + fn == 0
    precision_undef = tp + fp == 0
    return EvaluationReport(
        tp, fp, fn,
        recall=1.0 if recall_undef else tp / (tp + fn),
        precision=1.0 if precision_undef else tp / (tp + fp),
        recall_undefined=recall_undef,
        precision_undefined=precision_undef,
    )


def iou(a, b) -> float:
    ax, ay, aw, ah = a[:4]
    bx, by, bw, bh = b[:4]
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def score_map(features: np.ndarray, model: DetectorModel) -> np.ndarray:
    """Window scores by a row-filter pass followed by a column-filter pass.

    Output has shape ``(cells_y - 9, cells_x - 9)``; entry ``[y, x]`` scores
    the window whose top-left cell is ``(y, x)``. Too-small inputs give an
    empty ``(0, 0)`` grid.
    """
    w = model.weights
    wy, wx, nf = w.shape
    cy, cx = features.shape[:2]
    ny, nx = cy - wy + 1, cx - wx + 1
    if ny <= 0 or nx <= 0:
        return np.empty((0, 0))
    # rows[dy, y, x, f]: weighted sum of feature f over the wx cells right of (y, x)
    rows = np.zeros((wy, cy, nx, nf))
    for dx in range(wx):
        rows += w[:, dx, None, None, :] * features[None, :, dx:dx + nx, :]
    scores = np.zeros((ny, nx))
    for dy in range(wy):
        scores += rows[dy, dy:dy + ny].sum(axis=-1)
    return scores - model.bias


def _nms_key(d: Detection):
    return (-d.score, d.box[0], d.box[1], d.box[2], d.model_index)


def nms(candidates, overlap: float = NMS_OVERLAP) -> list[Detection]:
    """Greedy suppression: keep the best box, drop anything overlapping it by more than ``overlap``."""
    kept: list[Detection] = []
    for cand in sorted(candidates, key=_nms_key):
        if all(iou(cand.box, k.box) <= overlap for k in kept):
            kept.append(cand)
    return kept


def _check_models(models) -> list:
    models = list(models)
    if not models:
        raise ValueError("at least one model is required")
    windows = {m.window for m in models}
    cells = {m.window_cells for m in models}
    if len(windows) > 1 or len(cells) > 1:
        raise IncompatibleModelsError(f"mixed window sizes: {sorted(windows)}")
    return models


def candidates_from_features(level_features, pyramid: hog.Pyramid, models, cell_size=8,
                             threshold=None) -> list[Detection]:
    """All windows scoring above threshold (model's own unless given), before NMS."""
    out = []
    for level, feats in enumerate(level_features):
        s = pyramid.scale(level)
        for mi, model in enumerate(models):
            smap = score_map(feats, model)
            thr = model.detection_threshold if threshold is None else threshold
            ys, xs = np.nonzero(smap > thr)
            side = model.window * s
            for y, x in zip(ys.tolist(), xs.tolist()):
                box = (x * cell_size * s, y * cell_size * s, side, side)
                out.append(Detection(box, float(smap[y, x]), mi))
    return out


def image_features(image, window=80, config=hog.DEFAULT_CONFIG):
    """Per-level feature images, skipping levels smaller than one cell."""
    pyr = hog.build_pyramid(image, window, config)
    feats = []
    for level in pyr.levels:
        if min(level.shape) < config.cell_size:
            break
        feats.append(hog.extract_features(level, config))
    return feats, pyr


def detect(image, models) -> list[Detection]:
    models = _check_models(models)
    config = models[0].extractor_config
    feats, pyr = image_features(image, models[0].window, config)
    return nms(candidates_from_features(feats, pyr, models, config.cell_size))


# ----------------------------------------------------------------------- training


def _window_vector(feats, y, x, wy, wx):
    return feats[y:y + wy, x:x + wx].ravel()


def _positive_windows(feats, pyr, box, wy, wx, cell, window):
    """Feature window for a truth box at the level whose scaled box is nearest the window."""
    bx, by, bw, bh = box
    side = max(bw, bh)
    best = None
    for level, f in enumerate(feats):
        if f.shape[0] < wy or f.shape[1] < wx:
            continue
        delta = abs(side / pyr.scale(level) - window)
        if best is None or delta < best[0]:
            best = (delta, level)
    if best is None:
        return None
    level = best[1]
    f = feats[level]
    s = pyr.scale(level)
    cx = (bx + bw / 2) / s
    cy = (by + bh / 2) / s
    x = int(round((cx - window / 2) / cell))
    y = int(round((cy - window / 2) / cell))
    x = min(max(x, 0), f.shape[1] - wx)
    y = min(max(y, 0), f.shape[0] - wy)
    return _window_vector(f, y, x, wy, wx)


def _window_box(level, y, x, pyr, cell, window):
    s = pyr.scale(level)
    return (x * cell * s, y * cell * s, window * s, window * s)


def fit_linear_svm(X, y, c, epsilon, seed=0, max_epochs=1000, bias_scale=1.0):
    """Dual coordinate descent for ``0.5|w|^2 + c * sum(hinge(y * (w.x - b)))``.

    The bias is learned as the weight of a constant feature ``bias_scale``
    (so it is lightly regularised). Coordinates are visited in a seeded
    permutation each epoch; training stops when the relative duality gap
    drops to ``epsilon``. Returns ``(w, b, history)`` where ``history`` holds
    the best primal objective after each epoch (non-increasing).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    Xa = np.hstack([X, np.full((n, 1), bias_scale)])
    qii = np.einsum("ij,ij->i", Xa, Xa)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.default_rng(seed)

    def primal(wv):
        return 0.5 * float(wv @ wv) + c * float(np.maximum(1.0 - y * (Xa @ wv), 0.0).sum())

    best_obj, best_w = primal(w), w.copy()
    history = [best_obj]
    for _ in range(max_epochs):
        for i in rng.permutation(n):
            if qii[i] == 0.0:
                continue
            g = y[i] * (w @ Xa[i]) - 1.0
            a = alpha[i]
            if (a == 0.0 and g >= 0.0) or (a == c and g <= 0.0):
                continue
            new = min(max(a - g / qii[i], 0.0), c)
            if new != a:
                w += (new - a) * y[i] * Xa[i]
                alpha[i] = new
        obj = primal(w)
        if obj < best_obj:
            best_obj, best_w = obj, w.copy()
        history.append(best_obj)
        dual = float(alpha.sum()) - 0.5 * float(w @ w)
        if best_obj - dual <= epsilon * abs(best_obj):
            break
    return best_w[:d], -float(best_w[d]) * bias_scale, history


@dataclass
class _ImageData:
    feats: list
    pyr: hog.Pyramid
    truths: list
    ignores: list


def _prepare(dataset, window, config, cache):
    data = []
    for rec in dataset.images:
        key = rec.key
        if cache is not None and key in cache:
            feats, pyr = cache[key]
        else:
            feats, pyr = image_features(rec.load_image(), window, config)
            if cache is not None:
                cache[key] = (feats, pyr)
        truths = [b.rect for b in rec.boxes if not b.ignore]
        ignores = [b.rect for b in rec.boxes if b.ignore]
        data.append(_ImageData(feats, pyr, truths, ignores))
    return data


def train_detector(dataset, params: DetectorTrainParams | None = None,
                   config: hog.HogConfig = hog.DEFAULT_CONFIG, cache: dict | None = None):
    """Train a window classifier with hard-negative mining.

    ``cache`` may map image paths to precomputed ``(features, pyramid)``
    pairs and is filled as images are processed; sharing it across runs on
    overlapping data avoids recomputing HOG pyramids.
    Returns the model; the final optimiser history is attached as
    ``model.training_history``.
    """
    params = params or DetectorTrainParams()
    if dataset is None or not dataset.images:
        raise TrainingDataError("empty dataset")
    if not any(not b.ignore for rec in dataset.images for b in rec.boxes):
        raise TrainingDataError("dataset has no non-ignored boxes")
    window = params.target_size
    cell = config.cell_size
    wy = wx = window // cell
    rng = np.random.default_rng(params.seed)
    data = _prepare(dataset, window, config, cache)

    pos = []
    for img in data:
        for box in img.truths:
            bw, bh = box[2], box[3]
            if not 0.5 <= bw / bh <= 2.0:
                continue
            v = _positive_windows(img.feats, img.pyr, box, wy, wx, cell, window)
            if v is not None:
                pos.append(v)
    if not pos:
        raise TrainingDataError("no positive box fits the detection window")

    seen = set()
    neg = []
    for ii, img in enumerate(data):
        blockers = img.truths + img.ignores
        slots = []
        for level, f in enumerate(img.feats):
            ny, nx = f.shape[0] - wy + 1, f.shape[1] - wx + 1
            if ny <= 0 or nx <= 0:
                continue
            for y in range(ny):
                for x in range(nx):
                    box = _window_box(level, y, x, img.pyr, cell, window)
                    if all(iou(box, bb) == 0.0 for bb in blockers):
                        slots.append((level, y, x))
        if not slots:
            continue
        take = min(params.negatives_per_image, len(slots))
        for k in rng.choice(len(slots), size=take, replace=False):
            level, y, x = slots[k]
            seen.add((ii, level, y, x))
            neg.append(_window_vector(img.feats[level], y, x, wy, wx))
    if not neg:
        raise TrainingDataError("no negative windows available")

    model = None
    for rnd in range(params.mining_rounds + 1):
        X = np.vstack(pos + neg)
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        w, b, history = fit_linear_svm(X, y, params.c, params.epsilon, seed=params.seed + rnd,
                                       max_epochs=params.max_epochs)
        model = DetectorModel(w.reshape(wy, wx, -1), float(b), window, config, 0.0)
        log.debug("round %d: %d pos, %d neg, objective %.4f", rnd, len(pos), len(neg), history[-1])
        if rnd == params.mining_rounds:
            break
        added = 0
        for ii, img in enumerate(data):
            hard = []
            for level, f in enumerate(img.feats):
                smap = score_map(f, model)
                for yy, xx in zip(*np.nonzero(smap > params.mining_threshold)):
                    key = (ii, level, int(yy), int(xx))
                    if key in seen:
                        continue
                    box = _window_box(level, yy, xx, img.pyr, cell, window)
                    if any(iou(box, t) >= MATCH_OVERLAP for t in img.truths):
                        continue
                    if any(iou(box, t) > MATCH_OVERLAP for t in img.ignores):
                        continue
                    hard.append((float(smap[yy, xx]), key, box))
            hard.sort(key=lambda h: (-h[0], h[1]))
            kept = []
            for score, key, box in hard:
                if len(kept) >= params.mined_per_image:
                    break
                if all(iou(box, k[2]) <= NMS_OVERLAP for k in kept):
                    kept.append((score, key, box))
            for _, key, _ in kept:
                seen.add(key)
                _, level, yy, xx = key
                neg.append(_window_vector(img.feats[level], yy, xx, wy, wx))
                added += 1
        if added == 0:
            break
    model.training_history = history
    return model


# ----------------------------------------------------------------------- evaluation


def match_detections(detections, truths, ignores=()):
    """Greedy score-ordered matching; returns (tp, fp, fn)."""
    matched = set()
    tp = fp = 0
    for det in sorted(detections, key=_nms_key):
        best, best_iou = None, MATCH_OVERLAP
        for ti, t in enumerate(truths):
            if ti in matched:
                continue
            o = iou(det.box, t)
            if o > best_iou:
                best, best_iou = ti, o
        if best is not None:
            matched.add(best)
            tp += 1
        elif any(iou(det.box, g) > MATCH_OVERLAP for g in ignores):
            continue
        else:
            fp += 1
    return tp, fp, len(truths) - len(matched)


def evaluate_detector(models, dataset, cache: dict | None = None) -> EvaluationReport:
    if isinstance(models, DetectorModel):
        models = [models]
    models = _check_models(models)
    config = models[0].extractor_config
    tp = fp = fn = 0
    for rec in dataset.images:
        key = rec.key
        if cache is not None and key in cache:
            feats, pyr = cache[key]
        else:
            feats, pyr = image_features(rec.load_image(), models[0].window, config)
            if cache is not None:
                cache[key] = (feats, pyr)
        dets = nms(candidates_from_features(feats, pyr, models, config.cell_size))
        truths = [b.rect for b in rec.boxes if not b.ignore]
        ignores = [b.rect for b in rec.boxes if b.ignore]
        a, b, c = match_detections(dets, truths, ignores)
        tp, fp, fn = tp + a, fp + b, fn + c
    return report_from_counts(tp, fp, fn)
