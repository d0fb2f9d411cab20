"""HOG feature extraction.

Images are 2-D float arrays indexed ``[y, x]``. The pipeline is

    build_pyramid -> compute_gradients -> histogramize -> extract_features

and yields, per pyramid level, a ``(cells_y, cells_x, 31)`` feature image:
18 contrast-sensitive bins, 9 contrast-insensitive bins and 4 block-energy
terms per 8x8 cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError

N_ORIENTATIONS = 18
N_FEATURES = 31
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
ENERGY_SCALE = 0.2357


@dataclass(frozen=True)
class HogConfig:
    """Extractor settings carried inside every detector model."""

    cell_size: int = 8
    scale_num: int = 5
    scale_den: int = 6
    truncation: float = 0.2
    epsilon: float = 1e-10

    @property
    def scale_factor(self) -> float:
        return self.scale_num / self.scale_den


DEFAULT_CONFIG = HogConfig()


@dataclass
class Pyramid:
    levels: list
    window: int = 80
    scale_num: int = 5
    scale_den: int = 6

    @property
    def scale_factor(self) -> float:
        return self.scale_num / self.scale_den

    def scale(self, level: int) -> float:
        """Factor mapping level-``level`` pixel coordinates back to the original."""
        return (self.scale_den / self.scale_num) ** level

    def __len__(self):
        return len(self.levels)


@dataclass
class GradientField:
    grad_x: np.ndarray
    grad_y: np.ndarray
    magnitude: np.ndarray
    orientation: np.ndarray  # int bin in [0, 18)

    @property
    def shape(self):
        return self.magnitude.shape


@dataclass
class CellGrid:
    hist: np.ndarray  # (cells_y, cells_x, 18)

    @property
    def cells_y(self) -> int:
        return self.hist.shape[0]

    @property
    def cells_x(self) -> int:
        return self.hist.shape[1]

    @property
    def energy(self) -> np.ndarray:
        half = N_ORIENTATIONS // 2
        return ((self.hist[..., :half] + self.hist[..., half:]) ** 2).sum(axis=-1)


def to_gray(pixels) -> np.ndarray:
    """Return a float64 luminance image from a 2-D gray or (H, W, 3|4) color array."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        r, g, b = LUMA_WEIGHTS
        return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    raise DegenerateInputError(f"unsupported image shape {arr.shape}")


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(height, in_h)
    x0, x1, fx = coords(width, in_w)
    rows = image[y0] * (1.0 - fy)[:, None] + image[y1] * fy[:, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def build_pyramid(image, window: int = 80, config: HogConfig = DEFAULT_CONFIG) -> Pyramid:
    """Repeatedly shrink by ``scale_num/scale_den`` while both sides stay >= ``window``.

    Level 0 is always the input, even when it is already smaller than the window.
    """
    image = to_gray(image)
    if image.size == 0:
        raise DegenerateInputError("empty image")
    if window < 1:
        raise ValueError("window must be >= 1")
    levels = [image]
    h, w = image.shape
    while True:
        h = h * config.scale_num // config.scale_den
        w = w * config.scale_num // config.scale_den
        if h < window or w < window:
            break
        levels.append(resize_bilinear(levels[-1], h, w))
    return Pyramid(levels, window, config.scale_num, config.scale_den)


def compute_gradients(image) -> GradientField:
    image = to_gray(image)
    if image.shape[0] < 3 or image.shape[1] < 3:
        raise DegenerateInputError(f"image {image.shape} is smaller than 3x3")
    gx = np.zeros_like(image)
    gy = np.zeros_like(image)
    # one-pixel frame keeps zero gradient
    gx[1:-1, 1:-1] = image[1:-1, 2:] - image[1:-1, :-2]
    gy[1:-1, 1:-1] = image[2:, 1:-1] - image[:-2, 1:-1]
    magnitude = np.sqrt(gx * gx + gy * gy)
    angle = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    orientation = np.floor(angle * (N_ORIENTATIONS / (2.0 * np.pi))).astype(np.intp)
    np.clip(orientation, 0, N_ORIENTATIONS - 1, out=orientation)
    return GradientField(gx, gy, magnitude, orientation)


def _interp_axis(n_pixels: int, n_cells: int, cell_size: int):
    # cell i is centred on pixel i*cell_size + cell_size/2; out-of-grid weight goes to the edge cell
    pos = (np.arange(n_pixels) - cell_size / 2.0) / cell_size
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    hi = np.clip(lo + 1, 0, n_cells - 1)
    lo = np.clip(lo, 0, n_cells - 1)
    return lo, hi, 1.0 - frac, frac


def histogramize(grads: GradientField, cell_size: int = 8) -> CellGrid:
    """Spatially interpolated per-cell orientation histograms.

    Each pixel's magnitude is split bilinearly over the four nearest cell
    centres, so the total histogram mass equals the total magnitude.
    """
    h, w = grads.shape
    if h < cell_size or w < cell_size:
        raise DegenerateInputError(f"gradient field {grads.shape} smaller than one cell")
    cy, cx = h // cell_size, w // cell_size
    ylo, yhi, wy0, wy1 = _interp_axis(h, cy, cell_size)
    xlo, xhi, wx0, wx1 = _interp_axis(w, cx, cell_size)
    mag = grads.magnitude
    orient = grads.orientation
    total = np.zeros(cy * cx * N_ORIENTATIONS)
    for ys, wy in ((ylo, wy0), (yhi, wy1)):
        for xs, wx in ((xlo, wx0), (xhi, wx1)):
            idx = (ys[:, None] * cx + xs[None, :]) * N_ORIENTATIONS + orient
            weights = mag * wy[:, None] * wx[None, :]
            total += np.bincount(idx.ravel(), weights=weights.ravel(), minlength=total.size)
    return CellGrid(total.reshape(cy, cx, N_ORIENTATIONS))


def block_norms(grid: CellGrid, epsilon: float = 1e-10) -> np.ndarray:
    """Inverse norms of the four 2x2 energy blocks containing each cell.

    Returns ``(cells_y, cells_x, 4)`` ordered down-right, up-right, down-left,
    up-left. Cells outside the grid count as zero energy.
    """
    e = np.pad(grid.energy, 1)
    blocks = e[:-1, :-1] + e[1:, :-1] + e[:-1, 1:] + e[1:, 1:]
    # blocks[y, x] covers cells (y-1..y, x-1..x)
    stacked = np.stack(
        [blocks[1:, 1:], blocks[:-1, 1:], blocks[1:, :-1], blocks[:-1, :-1]], axis=-1
    )
    return 1.0 / np.sqrt(stacked + epsilon)


def features_from_cells(grid: CellGrid, config: HogConfig = DEFAULT_CONFIG) -> np.ndarray:
    norms = block_norms(grid, config.epsilon)[..., None, :]  # (cy, cx, 1, 4)
    hist = grid.hist[..., :, None]
    half = N_ORIENTATIONS // 2
    signed = np.minimum(hist * norms, config.truncation)  # (cy, cx, 18, 4)
    unsigned = np.minimum((hist[..., :half, :] + hist[..., half:, :]) * norms, config.truncation)
    out = np.empty(grid.hist.shape[:2] + (N_FEATURES,))
    out[..., :N_ORIENTATIONS] = 0.5 * signed.sum(axis=-1)
    out[..., N_ORIENTATIONS:N_ORIENTATIONS + half] = 0.5 * unsigned.sum(axis=-1)
    out[..., N_ORIENTATIONS + half:] = ENERGY_SCALE * signed.sum(axis=-2)
    return out


def extract_features(image, config: HogConfig = DEFAULT_CONFIG) -> np.ndarray:
    """31-feature HOG image of shape ``(H // 8, W // 8, 31)``."""
    image = to_gray(image)
    if image.shape[0] < config.cell_size or image.shape[1] < config.cell_size:
        raise DegenerateInputError(f"image {image.shape} smaller than one cell")
    grid = histogramize(compute_gradients(image), config.cell_size)
    return features_from_cells(grid, config)


def pyramid_features(image, window: int = 80, config: HogConfig = DEFAULT_CONFIG):
    """Feature images for every pyramid level, plus the pyramid itself."""
    pyr = build_pyramid(image, window, config)
    return [extract_features(level, config) for level in pyr.levels], pyr
