"""Mean weight-matrix aggregation of detector models."""
from __future__ import annotations

import numpy as np

from .detector import DetectorModel
from .errors import IncompatibleModelsError


def order_free_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along ``axis`` after sorting, so the result is independent of input order."""
    return np.sort(values, axis=axis).sum(axis=axis)


def aggregate_mwma(models, multiplicities=None) -> DetectorModel:
    """Element-wise (multiplicity-weighted) mean of weights, bias and threshold.

    Window and extractor settings are copied from the first model. A
    multiplicity of ``k`` is equivalent to listing the model ``k`` times.
    """
    models = list(models)
    if not models:
        raise ValueError("no models to aggregate")
    if multiplicities is None:
        multiplicities = [1] * len(models)
    multiplicities = [int(m) for m in multiplicities]
    if len(multiplicities) != len(models) or any(m < 1 for m in multiplicities):
        raise ValueError("need one positive integer multiplicity per model")
    first = models[0]
    for m in models[1:]:
        if m.window != first.window or m.weights.shape != first.weights.shape:
            raise IncompatibleModelsError(
                f"window {m.window} {m.weights.shape} vs {first.window} {first.weights.shape}")
        if m.extractor_config != first.extractor_config:
            raise IncompatibleModelsError("extractor settings differ")

    mult = np.asarray(multiplicities, dtype=np.float64)
    total = float(mult.sum())

    def mean(values):
        v = np.asarray(values, dtype=np.float64)
        weighted = v * mult.reshape((-1,) + (1,) * (v.ndim - 1))
        return order_free_sum(weighted) / total

    if len(models) == 1:
        return DetectorModel(first.weights.copy(), first.bias, first.window,
                             first.extractor_config, first.detection_threshold)
    return DetectorModel(
        weights=mean([m.weights for m in models]),
        bias=float(mean([m.bias for m in models])),
        window=first.window,
        extractor_config=first.extractor_config,
        detection_threshold=float(mean([m.detection_threshold for m in models])),
    )
