"""Shallow-cue guided heat-map tracker with mixed holistic/part heads."""
from .core import BoundingBox, TrackerConfig, center_error, gaussian_map, iou, resize_bilinear
from .harness import SyntheticSpec, evaluate, load_sequence, run_tracker, synthesize
from .tracker import Tracker

__all__ = [
    "BoundingBox", "TrackerConfig", "Tracker", "SyntheticSpec",
    "center_error", "evaluate", "gaussian_map", "iou", "load_sequence",
    "resize_bilinear", "run_tracker", "synthesize",
]
__version__ = "0.1.0"
