"""Context-aware object detection on synthetic scenes."""

import json

from ._core import (
    CONTEXT_TOP_T,
    OVERLAP_THRESHOLDS,
    RELATION_CLUSTERS,
    BoundingBox,
    ConfigError,
    Error,
    MissingSegmentation,
    SchemaError,
    ShapeMismatch,
    average_precision,
    decode_addon,
    directed_hausdorff,
    encode_addon,
    evaluate_files,
    generate_split,
    heatmap_peak,
    iou,
    kmeans,
    noisy_or,
    relation_overlap_bits,
    select_context_regions,
)
from . import _core


def default_config():
    return json.loads(_core.default_config())


def resolve_config(config):
    return json.loads(_core.resolve_config(json.dumps(config)))


__all__ = [
    "CONTEXT_TOP_T",
    "OVERLAP_THRESHOLDS",
    "RELATION_CLUSTERS",
    "BoundingBox",
    "ConfigError",
    "Error",
    "MissingSegmentation",
    "SchemaError",
    "ShapeMismatch",
    "average_precision",
    "decode_addon",
    "default_config",
    "directed_hausdorff",
    "encode_addon",
    "evaluate_files",
    "generate_split",
    "heatmap_peak",
    "iou",
    "kmeans",
    "noisy_or",
    "relation_overlap_bits",
    "resolve_config",
    "select_context_regions",
]
