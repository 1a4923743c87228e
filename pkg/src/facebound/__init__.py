"""Boundary-aware facial landmark heatmap regression."""

__version__ = "0.1.0"

from .schemas import AnnotationSchema, BoundarySpec, flip_landmarks, get_schema  # noqa: E402
from .heatmaps import (  # noqa: E402
    HeatmapStack,
    RasterizerConfig,
    decode_heatmaps,
    rasterize_boundaries,
    rasterize_landmarks,
)
from .metrics import EvalReport, ced_auc, failure_rate, nme  # noqa: E402

__all__ = [
    "AnnotationSchema",
    "BoundarySpec",
    "EvalReport",
    "HeatmapStack",
    "RasterizerConfig",
    "ced_auc",
    "decode_heatmaps",
    "failure_rate",
    "flip_landmarks",
    "get_schema",
    "nme",
    "rasterize_boundaries",
    "rasterize_landmarks",
]
