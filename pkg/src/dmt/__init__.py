"""Distributed model training: HOG/SVM detection, ERT landmarks, pooled aggregation."""
from .detector import Detection, DetectorModel, DetectorTrainParams, detect, evaluate_detector, train_detector
from .ebc import closure_percent, ear, normalize_trace, trace_sequence
from .ert import ErtModel, ErtTrainParams, evaluate_ert, localize, train_ert
from .hog import HogConfig, extract_features
from .mwma import aggregate_mwma
from .wba import AggregatedErtModel, aggregate_wba, localize_wba

__version__ = "0.1.0"

__all__ = [
    "AggregatedErtModel", "Detection", "DetectorModel", "DetectorTrainParams", "ErtModel",
    "ErtTrainParams", "HogConfig", "aggregate_mwma", "aggregate_wba", "closure_percent", "detect",
    "ear", "evaluate_detector", "evaluate_ert", "extract_features", "localize", "localize_wba",
    "normalize_trace", "trace_sequence", "train_detector", "train_ert",
]
