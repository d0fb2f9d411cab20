"""Weighted bin aggregation of ERT models.

Sub-models are kept intact as subdivisions. At inference each subdivision
refines the shared (averaged) init shape through its own cascade; each
result is scaled by the subdivision's deviation, and the bins are summed and
divided by the total deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ert import ErtModel, _check_box, denormalize_shape, run_cascades
from .errors import IncompatibleModelsError
from .mwma import order_free_sum


@dataclass
class AggregatedErtModel:
    subdivisions: list
    deviations: list
    init_shape: np.ndarray

    @property
    def total_deviation(self) -> float:
        return math.fsum(self.deviations)

    @property
    def landmark_count(self) -> int:
        return self.init_shape.shape[0]

    @property
    def n_trees(self) -> int:
        return sum(m.n_trees for m in self.subdivisions)


def aggregate_wba(models, deviations=None) -> AggregatedErtModel:
    models = list(models)
    if not models:
        raise ValueError("no models to aggregate")
    if deviations is None:
        deviations = [1.0] * len(models)
    deviations = [float(d) for d in deviations]
    if len(deviations) != len(models):
        raise ValueError(f"{len(deviations)} deviations for {len(models)} models")
    if any(not d > 0 or not math.isfinite(d) for d in deviations):
        raise ValueError("deviations must be positive and finite")
    counts = {m.landmark_count for m in models}
    if len(counts) != 1:
        raise IncompatibleModelsError(f"mixed landmark counts {sorted(counts)}")
    init = order_free_sum(np.stack([m.init_shape for m in models])) / len(models)
    return AggregatedErtModel(models, deviations, init)


def localize_wba_normalized(image, face_box, model: AggregatedErtModel) -> np.ndarray:
    bins = np.stack([dev * run_cascades(image, face_box, sub, start=model.init_shape)
                     for sub, dev in zip(model.subdivisions, model.deviations)])
    return order_free_sum(bins) / model.total_deviation


def localize_wba(image, face_box, model: AggregatedErtModel) -> np.ndarray:
    """Landmarks in image pixels, ``(L, 2)``."""
    image = np.asarray(image, dtype=np.float64)
    _check_box(image, face_box)
    return denormalize_shape(localize_wba_normalized(image, face_box, model), face_box)


def localize_any(image, face_box, model) -> np.ndarray:
    """Dispatch to the plain or aggregated localizer."""
    from .ert import localize

    if isinstance(model, AggregatedErtModel):
        return localize_wba(image, face_box, model)
    if isinstance(model, ErtModel):
        return localize(image, face_box, model)
    raise TypeError(f"not a shape model: {type(model).__name__}")
