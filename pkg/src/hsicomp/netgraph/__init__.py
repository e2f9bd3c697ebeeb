from .engine import backward, cross_entropy, forward, predict, run
from .graph import (
    CONV_KINDS,
    INPUT,
    Kind,
    LayerNode,
    NetGraph,
    NormalizationParams,
    build_unet,
    fuse_symmetric_norm,
    graphs_equal,
    load,
    save,
)
from .train import Adam, TrainConfig, TrainResult, predict_batches, score, train

__all__ = [
    "Adam", "CONV_KINDS", "INPUT", "Kind", "LayerNode", "NetGraph", "NormalizationParams",
    "TrainConfig", "TrainResult", "backward", "build_unet", "cross_entropy", "forward",
    "fuse_symmetric_norm", "graphs_equal", "load", "predict", "predict_batches", "run",
    "save", "score", "train",
]
