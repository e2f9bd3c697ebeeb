"""Adam training loop with validation-wIoU model selection and early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from ..errors import DimensionError, TrainingError
from .engine import backward_from, cross_entropy, logits_node, run, update_running_stats
from .graph import NetGraph

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 8  # the reference setup used 30 on a GPU
    epochs: int = 30
    patience: int = 10  # epochs without val-wIoU improvement before stopping
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    eval_batch: int = 16


@dataclass
class TrainResult:
    graph: NetGraph
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, g: NetGraph, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for key, grad in grads.items():
            node, name = key
            p = g[node].params[name]
            m = self.m.get(key)
            if m is None or m.shape != p.shape:
                m = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m = self.b1 * m + (1 - self.b1) * grad
            v = self.b2 * v + (1 - self.b2) * grad * grad
            self.m[key], self.v[key] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            g[node].params[name] = (p - upd).astype(p.dtype)


def predict_batches(g: NetGraph, x: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch):
        vals, _ = run(g, x[i:i + batch], stop_at=logits_node(g))
        out.append(vals[logits_node(g)].argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[1:3], dtype=np.int64)


def score(g: NetGraph, x: np.ndarray, y: np.ndarray, batch: int = 16) -> metrics.Aggregate:
    pred = predict_batches(g, x, batch)
    cm = metrics.accumulate(pred, y, g.classes)
    return metrics.aggregate(cm)


def train(g: NetGraph, train_set, val_set, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train a copy of ``g``; the input graph is left untouched.

    ``train_set`` and ``val_set`` are ``(cubes (N, H, W, B), labels (N, H, W))``.
    Returns the weights with the best validation wIoU.
    """
    xt, yt = train_set
    xv, yv = val_set
    if len(xt) == 0 or len(xv) == 0:
        raise DimensionError("training and validation sets must be nonempty")
    g = g.copy()
    result = TrainResult(g)
    if cfg.epochs <= 0:
        return result
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    best = -np.inf
    best_graph = g.copy()
    stale = 0
    zid = logits_node(g)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xt))
        losses = []
        for i in range(0, len(order), cfg.batch):
            idx = np.sort(order[i:i + cfg.batch])
            vals, caches = run(g, xt[idx], training=True, rng=rng, keep=True)
            loss, dz = cross_entropy(vals[zid], yt[idx], g.classes)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged to {loss} at epoch {epoch}")
            grads = backward_from(g, vals, caches, {zid: dz})
            update_running_stats(g, caches)
            opt.step(g, grads)
            losses.append(loss)
        agg = score(g, xv, yv, cfg.eval_batch)
        result.history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                               "val_giou": agg.giou, "val_wiou": agg.wiou})
        log.info("epoch %d loss %.4f val wIoU %.4f", epoch, np.mean(losses), agg.wiou)
        if agg.wiou > best:
            best, stale = agg.wiou, 0
            best_graph = g.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    result.graph = best_graph
    return result
