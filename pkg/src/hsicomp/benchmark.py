"""The seed-pinned desk benchmark: synthetic data, a small U-Net, pruning and INT8.

Everything here is a composition of the library pieces, sized so the whole
flow runs on one CPU core in a few minutes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .complexity import analyze
from .data import Dataset, desk_spec, fold_rounds, generate, make_calibration
from .netgraph import NetGraph, build_unet, fuse_symmetric_norm
from .netgraph.train import TrainConfig, predict_batches, score, train
from .pruning import IterationConfig, IterationReport, run_iteration
from .quantization import (
    DriftReport,
    Policy,
    QuantParams,
    calibrate,
    cross_layer_equalize,
    fold_bn,
    quantized_predict,
    requantization_drift,
)
from .workflow import Prepared, prepare

log = logging.getLogger(__name__)


def desk_pruning() -> IterationConfig:
    # a 17-layer net locks proportionally more layers than a large one, hence 0.5
    return IterationConfig(overall_pr=0.5, locked_fraction=0.5, finetune_epochs=10, finetune_lr=1e-4)


@dataclass
class DeskConfig:
    seed: int = 0
    count: int = 200
    depth: int = 3
    init_filters: int = 16
    dropout: float = 0.2
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-3, batch=8, epochs=30, patience=8))
    pruning: IterationConfig = field(default_factory=desk_pruning)
    iterations: int = 2
    calib_images: int = 32


def desk_data(cfg: DeskConfig = DeskConfig()) -> Prepared:
    spec = desk_spec()
    calib = make_calibration(spec)
    return prepare(Dataset(generate(spec, cfg.seed, cfg.count, calib), calib, spec))


def train_baseline(p: Prepared, cfg: DeskConfig = DeskConfig()) -> NetGraph:
    tr, va, _ = p.split(0)
    h, w = p.cubes.shape[1:3]
    g = build_unet(cfg.depth, cfg.init_filters, p.cubes.shape[3], p.classes, cfg.dropout,
                   seed=cfg.seed, input_hw=(h, w))
    return train(g, tr, va, cfg.train).graph


def prune_iteratively(g: NetGraph, p: Prepared, cfg: IterationConfig, iterations: int):
    tr, va, _ = p.split(0)
    reports = []
    for it in range(iterations):
        g, rep = run_iteration(g, tr, va, cfg, final=it == iterations - 1)
        log.info("iteration %d: flops ratio %.3f", it + 1, rep.flops_ratio)
        reports.append(rep)
    return g, reports


@dataclass
class QuantBundle:
    explicit: NetGraph  # BN folded (and equalized), expects symmetric-normalized input
    fused: NetGraph  # same weights behind a normalization layer, expects clipped reflectance
    params: dict[str, QuantParams]
    params_fused: dict[str, QuantParams]
    float_drift: DriftReport
    drift: DriftReport
    agreement: float  # INT8 vs float argmax on the validation fold


def quantize_for_deployment(g: NetGraph, p: Prepared, rnd: int = 0, calib_images: int = 32,
                            cle: bool = True, window: int = 4) -> QuantBundle:
    train_idx, val_idx, _ = fold_rounds(p.folds)[rnd]
    folded = fold_bn(g)
    if cle:
        folded = cross_layer_equalize(folded)
    fused = fuse_symmetric_norm(folded, p.norm)
    idx = np.asarray(train_idx[:calib_images])
    params = calibrate(folded, p.normalized(idx), Policy(window=window))
    params_fused = calibrate(fused, p.cubes[idx], Policy.fused(float(p.stats.th.max())))
    val = np.asarray(val_idx)
    x = p.normalized(val)
    ref = predict_batches(g, x)
    q = np.concatenate([quantized_predict(folded, params, x[i:i + 8]) for i in range(0, len(x), 8)])
    labels = list(p.labels[val])
    return QuantBundle(
        folded, fused, params, params_fused,
        requantization_drift(folded, fused, None, None, p.cubes[val], labels),
        requantization_drift(folded, fused, params, params_fused, p.cubes[val], labels),
        float((q == ref).mean()),
    )


@dataclass
class DeskResult:
    prepared: Prepared
    baseline: NetGraph
    pruned: NetGraph
    reports: list[IterationReport]
    base_val_wiou: float
    base_test_wiou: float
    pruned_val_wiou: float
    pruned_test_wiou: float
    flops_ratio: float
    seconds: float

    def summary(self) -> dict:
        return {
            "flops_ratio": self.flops_ratio,
            "base_val_wiou": self.base_val_wiou, "pruned_val_wiou": self.pruned_val_wiou,
            "base_test_wiou": self.base_test_wiou, "pruned_test_wiou": self.pruned_test_wiou,
            "iterations": [r.to_dict() for r in self.reports], "seconds": self.seconds,
        }


def run_desk(cfg: DeskConfig = DeskConfig()) -> DeskResult:
    t0 = time.perf_counter()
    p = desk_data(cfg)
    base = train_baseline(p, cfg)
    pruned, reports = prune_iteratively(base, p, cfg.pruning, cfg.iterations)
    _, va, te = p.split(0)
    return DeskResult(
        p, base, pruned, reports,
        score(base, *va).wiou, score(base, *te).wiou, score(pruned, *va).wiou, score(pruned, *te).wiou,
        analyze(pruned).flops / analyze(base).flops, time.perf_counter() - t0,
    )
