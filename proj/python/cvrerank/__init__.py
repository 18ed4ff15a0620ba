"""Correlation-verification re-ranking: cross-scale 4D correlation, a center-pivot
4D encoder, toy training and fused global + verification retrieval."""

from ._core import (
    CvrError,
    EncoderConfig,
    EncoderWeights,
    FeatureStore,
    RankedEntry,
    RankedList,
    ToyConfig,
    average_precision,
    build_pyramid,
    conv4d_center_pivot,
    correlate,
    cross_scale_correlation,
    dequantize,
    global_rank,
    ingest,
    load_tensor,
    make_toy_dataset,
    quantize,
    rerank_topk,
    resize_bilinear,
    save_tensor,
    train_toy,
)

__all__ = [
    "CvrError",
    "EncoderConfig",
    "EncoderWeights",
    "FeatureStore",
    "RankedEntry",
    "RankedList",
    "ToyConfig",
    "average_precision",
    "build_pyramid",
    "conv4d_center_pivot",
    "correlate",
    "cross_scale_correlation",
    "dequantize",
    "global_rank",
    "ingest",
    "load_tensor",
    "make_toy_dataset",
    "quantize",
    "rerank_topk",
    "resize_bilinear",
    "save_tensor",
    "train_toy",
]
