"""Ensemble-of-regression-trees landmark predictor.

Shapes are ``(L, 2)`` arrays. Inside a model every shape is expressed in
face-box coordinates, where the box spans the unit square. ``localize``
converts to and from image pixels.

A cascade level holds a pool of anchor points (each tied to its nearest
landmark of the mean shape, plus an offset) and a forest of depth-``d``
trees. ``d`` counts layers including the leaves, so a tree has
``2**(d-1) - 1`` splits and ``2**(d-1)`` leaves (16 for depth 5).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, IncompatibleModelsError, TrainingDataError, ValidationError

log = logging.getLogger(__name__)

# 1-based outer eye corners of the 68-point layout, used for interocular normalisation
OUTER_EYE_CORNERS = (37, 46)


@dataclass
class ErtTrainParams:
    oversampling: int = 20
    nu: float = 0.1
    tree_depth: int = 5
    feature_pool_size: int = 400
    test_splits: int = 20
    cascades: int = 10
    trees_per_cascade: int = 500
    lambda_: float = 0.1
    seed: int = 0
    pool_padding: float = 0.1
    single_sample_jitter: float = 0.05

    def __post_init__(self):
        for name in ("oversampling", "nu", "tree_depth", "feature_pool_size", "test_splits",
                     "cascades", "trees_per_cascade", "lambda_"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tree_depth < 2:
            raise ValueError("tree_depth must be >= 2 (one split layer plus leaves)")
        if self.feature_pool_size < 2:
            raise ValueError("feature_pool_size must be >= 2")


@dataclass
class RegressionTree:
    split_a: np.ndarray  # (n_splits,) anchor indices
    split_b: np.ndarray
    thresholds: np.ndarray
    leaves: np.ndarray  # (n_leaves, L, 2)

    @property
    def depth(self) -> int:
        return int(math.log2(len(self.leaves))) + 1

    def leaf_index(self, pixels: np.ndarray) -> int:
        node = 0
        n_splits = len(self.split_a)
        while node < n_splits:
            left = pixels[self.split_a[node]] - pixels[self.split_b[node]] > self.thresholds[node]
            node = 2 * node + (1 if left else 2)
        return node - n_splits


@dataclass
class CascadeLevel:
    anchor_landmark: np.ndarray  # (P,)
    anchor_offset: np.ndarray  # (P, 2), relative to the mean shape
    split_a: np.ndarray  # (T, n_splits)
    split_b: np.ndarray
    thresholds: np.ndarray
    leaves: np.ndarray  # (T, n_leaves, L, 2)

    @property
    def n_trees(self) -> int:
        return self.split_a.shape[0]

    @property
    def depth(self) -> int:
        return int(math.log2(self.leaves.shape[1])) + 1

    @property
    def trees(self) -> list[RegressionTree]:
        return [RegressionTree(self.split_a[t], self.split_b[t], self.thresholds[t], self.leaves[t])
                for t in range(self.n_trees)]

    def leaf_indices(self, pixels: np.ndarray) -> np.ndarray:
        """Leaf reached in every tree, ``(N, T)``, for pixel rows ``(N, P)``."""
        n = pixels.shape[0]
        t = self.n_trees
        rows = np.arange(n)[:, None]
        cols = np.arange(t)[None, :]
        node = np.zeros((n, t), dtype=np.intp)
        for _ in range(self.depth - 1):
            a = self.split_a[cols, node]
            b = self.split_b[cols, node]
            left = pixels[rows, a] - pixels[rows, b] > self.thresholds[cols, node]
            node = 2 * node + 2 - left
        return node - self.split_a.shape[1]

    def delta(self, pixels: np.ndarray) -> np.ndarray:
        """Summed leaf values, ``(N, L, 2)``."""
        leaf = self.leaf_indices(pixels)
        out = np.zeros((pixels.shape[0],) + self.leaves.shape[2:])
        for t in range(self.n_trees):
            out += self.leaves[t, leaf[:, t]]
        return out


@dataclass
class ErtModel:
    init_shape: np.ndarray  # (L, 2) normalised
    cascades: list = field(default_factory=list)

    def __post_init__(self):
        self.init_shape = np.asarray(self.init_shape, dtype=np.float64)

    @property
    def landmark_count(self) -> int:
        return self.init_shape.shape[0]

    @property
    def n_trees(self) -> int:
        return sum(c.n_trees for c in self.cascades)


# ----------------------------------------------------------------------- geometry


def normalize_shape(points, box) -> np.ndarray:
    left, top, w, h = box[:4]
    return (np.asarray(points, dtype=np.float64) - (left, top)) / (w, h)


def denormalize_shape(points, box) -> np.ndarray:
    left, top, w, h = box[:4]
    return np.asarray(points, dtype=np.float64) * (w, h) + (left, top)


def _similarity_params(src, dst):
    src_c = src - src.mean(axis=-2, keepdims=True)
    dst_c = dst - dst.mean(axis=-2, keepdims=True)
    var = (src_c ** 2).sum(axis=(-1, -2))
    a = (src_c * dst_c).sum(axis=(-1, -2))
    b = (src_c[..., 0] * dst_c[..., 1] - src_c[..., 1] * dst_c[..., 0]).sum(axis=-1)
    return a, b, var


def similarity_transform(src, dst):
    """Least-squares ``(scale, rotation, translation)`` with ``dst ~ scale * R(rotation) @ src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 2:
        raise ValueError("shapes must be matching (L, 2) arrays with L >= 2")
    a, b, var = _similarity_params(src, dst)
    if var <= 1e-300:
        raise DegenerateInputError("source shape has no spread")
    a, b = a / var, b / var
    scale = math.hypot(a, b)
    rotation = math.atan2(b, a)
    lin = np.array([[a, -b], [b, a]])
    t = dst.mean(axis=0) - lin @ src.mean(axis=0)
    return scale, rotation, (float(t[0]), float(t[1]))


def _similarity_linear(ref, shapes):
    """Linear part ``(N, 2, 2)`` of the transforms mapping ``ref`` onto each of ``shapes``."""
    a, b, var = _similarity_params(ref[None], shapes)
    var = np.where(var > 1e-300, var, 1.0)
    a, b = a / var, b / var
    return np.stack([np.stack([a, -b], -1), np.stack([b, a], -1)], -2)


def sample_pixels(image, box, shapes, ref_shape, level: CascadeLevel) -> np.ndarray:
    """Intensities at the level's anchors for each current shape estimate; ``(N, P)``.

    Anchors follow the similarity transform from ``ref_shape`` to the
    current estimate; coordinates outside the image clamp to the border.
    """
    shapes = np.asarray(shapes, dtype=np.float64).reshape(-1, ref_shape.shape[0], 2)
    lin = _similarity_linear(ref_shape, shapes)
    pts = shapes[:, level.anchor_landmark] + np.einsum("nij,pj->npi", lin, level.anchor_offset)
    left, top, w, h = box[:4]
    xs = np.clip(np.rint(left + pts[..., 0] * w), 0, image.shape[1] - 1).astype(np.intp)
    ys = np.clip(np.rint(top + pts[..., 1] * h), 0, image.shape[0] - 1).astype(np.intp)
    return image[ys, xs]


def _check_box(image, box):
    left, top, w, h = box[:4]
    ih, iw = image.shape[:2]
    if w <= 0 or h <= 0:
        raise ValidationError(f"face box {tuple(box)} has non-positive size")
    if left >= iw or top >= ih or left + w <= 0 or top + h <= 0:
        raise ValidationError(f"face box {tuple(box)} lies outside the {iw}x{ih} image")


def run_cascades(image, box, model: ErtModel, start=None) -> np.ndarray:
    """Refine ``start`` (default: the model's init shape) through every level; normalised output."""
    current = (model.init_shape if start is None else np.asarray(start, dtype=np.float64)).copy()
    for level in model.cascades:
        pix = sample_pixels(image, box, current[None], model.init_shape, level)
        current += level.delta(pix)[0]
    return current


def localize(image, face_box, model: ErtModel) -> np.ndarray:
    """Landmarks in image pixels, ``(L, 2)``."""
    image = np.asarray(image, dtype=np.float64)
    _check_box(image, face_box)
    return denormalize_shape(run_cascades(image, face_box, model), face_box)


# ----------------------------------------------------------------------- error metric


def error_normalizer(truth_pixels, box) -> float:
    """Interocular distance for 68-point shapes, else the face-box diagonal."""
    truth_pixels = np.asarray(truth_pixels)
    a, b = OUTER_EYE_CORNERS
    if truth_pixels.shape[0] >= b:
        d = float(np.linalg.norm(truth_pixels[a - 1] - truth_pixels[b - 1]))
        if d > 0:
            return d
    return math.hypot(box[2], box[3])


def shape_error(placed, truth, box) -> float:
    """Mean landmark distance divided by :func:`error_normalizer`."""
    placed = np.asarray(placed, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    d = np.sqrt(((placed - truth) ** 2).sum(axis=1)).mean()
    return float(d / error_normalizer(truth, box))


def evaluate_ert(model, dataset) -> float:
    """Mean normalised landmark error over every annotated, non-ignored box."""
    from .wba import AggregatedErtModel, localize_wba

    errors = []
    for rec in dataset.images:
        img = None
        for box in rec.boxes:
            if box.ignore or not box.parts:
                continue
            if img is None:
                img = rec.load_image()
            if isinstance(model, AggregatedErtModel):
                placed = localize_wba(img, box.rect, model)
            else:
                placed = localize(img, box.rect, model)
            errors.append(shape_error(placed, box.shape_array(), box.rect))
    if not errors:
        raise ValidationError("dataset has no annotated shapes")
    return float(np.mean(errors))


# ----------------------------------------------------------------------- training


def _draw_pairs(rng, n, anchor_pts, lam):
    """``n`` anchor pairs accepted with probability ``exp(-lam * distance)``."""
    p = len(anchor_pts)
    a_out, b_out = [], []
    while len(a_out) < n:
        a = rng.integers(0, p, 2 * n)
        b = rng.integers(0, p, 2 * n)
        u = rng.uniform(0, 1, 2 * n)
        dist = np.linalg.norm(anchor_pts[a] - anchor_pts[b], axis=1)
        ok = (a != b) & (u < np.exp(-lam * dist))
        a_out.extend(a[ok].tolist())
        b_out.extend(b[ok].tolist())
    return np.array(a_out[:n]), np.array(b_out[:n])


def fit_tree(pixels, residuals, rng, params: ErtTrainParams, anchor_pts):
    """Greedy regression tree on ``residuals`` ``(S, D)``; returns arrays and each sample's leaf."""
    s, d = residuals.shape
    n_splits = 2 ** (params.tree_depth - 1) - 1
    split_a = np.zeros(n_splits, dtype=np.intp)
    split_b = np.zeros(n_splits, dtype=np.intp)
    thresholds = np.zeros(n_splits)
    node_of = np.zeros(s, dtype=np.intp)
    for node in range(n_splits):
        members = np.flatnonzero(node_of == node)
        a, b = _draw_pairs(rng, params.test_splits, anchor_pts, params.lambda_)
        u = rng.uniform(0, 1, params.test_splits)
        if len(members) == 0:
            split_a[node], split_b[node], thresholds[node] = a[0], b[0], 0.0
            continue
        diff = pixels[members][:, a] - pixels[members][:, b]  # (m, C)
        lo, hi = diff.min(axis=0), diff.max(axis=0)
        thr = lo + u * (hi - lo)
        left = diff > thr
        r = residuals[members]
        left_sum = left.T.astype(np.float64) @ r  # (C, D)
        left_n = left.sum(axis=0)
        right_sum = r.sum(axis=0)[None, :] - left_sum
        right_n = len(members) - left_n
        score = ((left_sum ** 2).sum(axis=1) / np.maximum(left_n, 1)
                 + (right_sum ** 2).sum(axis=1) / np.maximum(right_n, 1))
        best = int(np.argmax(score))
        split_a[node], split_b[node], thresholds[node] = a[best], b[best], thr[best]
        node_of[members] = 2 * node + 2 - left[:, best]
    leaf = node_of - n_splits
    n_leaves = n_splits + 1
    sums = np.zeros((n_leaves, d))
    np.add.at(sums, leaf, residuals)
    counts = np.bincount(leaf, minlength=n_leaves)
    leaves = params.nu * sums / np.maximum(counts, 1)[:, None]
    return split_a, split_b, thresholds, leaves, leaf


def _initial_estimates(targets, params, rng):
    m = len(targets)
    mean = targets.mean(axis=0)
    starts, owners = [], []
    for i in range(m):
        for k in range(params.oversampling):
            if k == 0:
                # the start used at inference time is always among the training starts
                starts.append(mean)
            elif m == 1:
                jitter = params.single_sample_jitter
                starts.append(mean + rng.uniform(-jitter, jitter, mean.shape))
            else:
                j = int(rng.integers(0, m - 1))
                starts.append(targets[j if j < i else j + 1])
            owners.append(i)
    return np.array(starts), np.array(owners)


def _training_error(current, targets, owners, boxes, truths_px):
    errs = []
    for k in range(len(current)):
        i = owners[k]
        w, h = boxes[i][2], boxes[i][3]
        d = np.sqrt((((current[k] - targets[i]) * (w, h)) ** 2).sum(axis=1)).mean()
        errs.append(d / error_normalizer(truths_px[i], boxes[i]))
    return float(np.mean(errs))


def train_ert(dataset, params: ErtTrainParams | None = None) -> ErtModel:
    """Gradient-boosted cascade trained on every annotated non-ignored box.

    The returned model carries ``training_errors``: the mean normalised
    error of the oversampled training estimates before the first level and
    after each level.
    """
    params = params or ErtTrainParams()
    items = [(rec, box) for rec, box in dataset.boxes() if box.parts] if dataset is not None else []
    if not items:
        raise TrainingDataError("no annotated shapes to train on")
    counts = {len(box.parts) for _, box in items}
    if len(counts) != 1:
        raise IncompatibleModelsError(f"inconsistent landmark counts {sorted(counts)}")
    n_lm = counts.pop()
    if n_lm < 2:
        raise TrainingDataError("shapes need at least two landmarks")

    rng = np.random.default_rng(params.seed)
    cache = {}
    images, boxes, truths_px = [], [], []
    for rec, box in items:
        if rec.key not in cache:
            cache[rec.key] = np.asarray(rec.load_image(), dtype=np.float64)
        images.append(cache[rec.key])
        boxes.append(box.rect)
        truths_px.append(box.shape_array())
    targets = np.array([normalize_shape(t, b) for t, b in zip(truths_px, boxes)])
    init_shape = targets.mean(axis=0)
    current, owners = _initial_estimates(targets, params, rng)
    by_image = [np.flatnonzero(owners == i) for i in range(len(items))]

    n_splits = 2 ** (params.tree_depth - 1) - 1
    errors = [_training_error(current, targets, owners, boxes, truths_px)]
    levels = []
    lo, hi = init_shape.min(axis=0), init_shape.max(axis=0)
    pad = params.pool_padding * (hi - lo)
    for c in range(params.cascades):
        pts = rng.uniform(lo - pad, hi + pad, (params.feature_pool_size, 2))
        nearest = np.argmin(((pts[:, None, :] - init_shape[None]) ** 2).sum(axis=-1), axis=1)
        offsets = pts - init_shape[nearest]
        level = CascadeLevel(
            nearest, offsets,
            np.zeros((params.trees_per_cascade, n_splits), dtype=np.intp),
            np.zeros((params.trees_per_cascade, n_splits), dtype=np.intp),
            np.zeros((params.trees_per_cascade, n_splits)),
            np.zeros((params.trees_per_cascade, n_splits + 1, n_lm, 2)),
        )
        pixels = np.empty((len(current), params.feature_pool_size))
        for i, idx in enumerate(by_image):
            pixels[idx] = sample_pixels(images[i], boxes[i], current[idx], init_shape, level)
        flat = current.reshape(len(current), -1)
        target_flat = targets[owners].reshape(len(current), -1)
        for t in range(params.trees_per_cascade):
            a, b, thr, leaves, leaf = fit_tree(pixels, target_flat - flat, rng, params, pts)
            level.split_a[t], level.split_b[t], level.thresholds[t] = a, b, thr
            level.leaves[t] = leaves.reshape(-1, n_lm, 2)
            flat += leaves[leaf]
        current = flat.reshape(current.shape)
        levels.append(level)
        errors.append(_training_error(current, targets, owners, boxes, truths_px))
        log.debug("cascade %d: training error %.5f", c, errors[-1])
    model = ErtModel(init_shape, levels)
    model.training_errors = errors
    return model
