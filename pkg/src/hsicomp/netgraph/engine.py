"""Forward inference and reverse-mode gradients over a NetGraph."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, LabelError
from ..tensor import Layout, Tensor
from . import ops
from .graph import INPUT, Kind, NetGraph


def _as_batch(g: NetGraph, x) -> np.ndarray:
    if isinstance(x, Tensor):
        x.require(Layout.BIP, "forward")
        x = x.array()[None]
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected (N, H, W, C) input, got shape {x.shape}")
    m = 2 ** g.depth
    if x.shape[1] % m or x.shape[2] % m:
        raise DimensionError(f"input {x.shape[1]}x{x.shape[2]} not divisible by {m}")
    if x.shape[3] != g.input_shape[2]:
        raise DimensionError(f"input has {x.shape[3]} bands, network expects {g.input_shape[2]}")
    return x.astype(g.dtype, copy=False)


def run(g: NetGraph, x, *, training=False, rng=None, keep=False, taps=None, stop_at=None):
    """Execute ``g`` on a batch.

    ``training`` uses batch statistics in BN (running stats are updated) and,
    when ``rng`` is given, samples dropout masks. ``keep`` retains the caches
    needed by :func:`backward_from`. ``taps`` is an optional callback
    ``taps(node_id, value) -> value`` invoked on every node output (used by
    simulated quantization). ``stop_at`` returns early with that node's output
    (the logits, typically).
    """
    x = _as_batch(g, x)
    vals = {INPUT: x}
    caches = {}
    if taps is not None:
        vals[INPUT] = taps(INPUT, x)
    for n in g:
        ins = [vals[s] for s in n.inputs]
        a = ins[0]
        k = n.kind
        if k is Kind.CONV:
            y, cols = ops.conv2d(a, n.params["weight"], n.params["bias"], want_cache=keep)
            if keep:
                caches[n.id] = cols
        elif k is Kind.TCONV:
            y = ops.tconv2d(a, n.params["weight"], n.params["bias"])
        elif k is Kind.NORM:
            y = a * n.params["weight"] + n.params["bias"]
        elif k is Kind.BN:
            eps = n.attrs.get("eps", 1e-5)
            if training:
                y, cache = ops.batchnorm_train(a, n.params["gamma"], n.params["beta"], eps)
                if keep:
                    caches[n.id] = cache
            else:
                y = ops.batchnorm_eval(a, n.params["gamma"], n.params["beta"],
                                       n.params["mean"], n.params["var"], eps)
        elif k is Kind.RELU:
            y = np.maximum(a, 0)
        elif k is Kind.POOL:
            y, idx = ops.maxpool2(a)
            if keep:
                caches[n.id] = idx
        elif k is Kind.DROPOUT:
            rate = n.attrs.get("rate", 0.0)
            if training and rng is not None and rate > 0:
                mask = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1 - rate)
                y = a * mask
                if keep:
                    caches[n.id] = mask
            else:
                y = a
        elif k is Kind.CONCAT:
            y = np.concatenate(ins, axis=-1)
        elif k is Kind.SOFTMAX:
            y = ops.softmax(a)
        else:  # pragma: no cover
            raise ValueError(f"unknown kind {k}")
        if taps is not None and k is not Kind.SOFTMAX:
            y = taps(n.id, y)
        vals[n.id] = y
        if stop_at == n.id:
            break
    return vals, caches


def forward(g: NetGraph, x) -> np.ndarray:
    """Class probabilities; (H, W, classes) for a single cube, (N, H, W, classes) for a batch."""
    single = isinstance(x, Tensor) or np.ndim(x) == 3
    vals, _ = run(g, x)
    p = vals[g.output]
    return p[0] if single else p


def predict(g: NetGraph, x) -> np.ndarray:
    return forward(g, x).argmax(axis=-1)


def logits_node(g: NetGraph) -> str:
    return g[g.output].inputs[0]


def cross_entropy(logits: np.ndarray, labels: np.ndarray, classes: int):
    """Mean pixelwise cross-entropy over non-ignored pixels and its logit gradient.

    ``labels == classes`` marks ignored pixels.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} vs logits {logits.shape[:-1]}")
    bad = (labels < 0) | (labels > classes)
    if bad.any():
        raise LabelError(f"label {labels[bad][0]} outside 0..{classes - 1} (ignore = {classes})")
    valid = labels != classes
    count = int(valid.sum())
    if count == 0:
        raise LabelError("every pixel is ignore-labelled; loss is empty")
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1, axis=-1)
    grad *= (valid / count)[..., None]
    return loss, grad.astype(logits.dtype)


def backward(g: NetGraph, x, labels, *, training=True, rng=None):
    """Loss and gradients of pixelwise cross-entropy.

    Returns ``(loss, grads)`` with ``grads[(node_id, param)]`` for conv weights
    and biases and BN gamma/beta. BN uses batch statistics when ``training``.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    vals, caches = run(g, x, training=training, rng=rng, keep=True)
    zid = logits_node(g)
    loss, dz = cross_entropy(vals[zid], labels, g.classes)
    return loss, backward_from(g, vals, caches, {zid: dz}, training=training)


def update_running_stats(g: NetGraph, caches) -> None:
    """Fold the batch statistics recorded by a training-mode ``run`` into BN running stats."""
    for n in g:
        if n.kind is not Kind.BN or n.id not in caches:
            continue
        xhat, _, mu, var = caches[n.id]
        m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
        mom = n.attrs.get("momentum", 0.1)
        unbiased = var * (m / max(m - 1, 1))
        dt = n.params["mean"].dtype
        n.params["mean"] = ((1 - mom) * n.params["mean"] + mom * mu).astype(dt)
        n.params["var"] = ((1 - mom) * n.params["var"] + mom * unbiased).astype(dt)


def backward_from(g: NetGraph, vals, caches, seed_grads, training=True):
    grads = {}
    dout = dict(seed_grads)
    for n in reversed(list(g)):
        if n.id not in dout:
            continue
        dy = dout.pop(n.id)
        k = n.kind
        a = vals[n.inputs[0]]
        if k is Kind.CONV:
            dx, dw, db = ops.conv2d_backward(dy, a.shape, caches[n.id], n.params["weight"])
            grads[(n.id, "weight")] = dw
            grads[(n.id, "bias")] = db
            dins = [dx]
        elif k is Kind.TCONV:
            dx, dw, db = ops.tconv2d_backward(dy, a, n.params["weight"])
            grads[(n.id, "weight")] = dw
            grads[(n.id, "bias")] = db
            dins = [dx]
        elif k is Kind.NORM:
            dins = [dy * n.params["weight"]]
        elif k is Kind.BN:
            if training:
                dx, dgm, dbt = ops.batchnorm_backward(dy, caches[n.id], n.params["gamma"])
            else:
                eps = n.attrs.get("eps", 1e-5)
                inv = 1.0 / np.sqrt(n.params["var"] + eps)
                xhat = (a - n.params["mean"]) * inv
                dgm = (dy * xhat).sum(axis=(0, 1, 2))
                dbt = dy.sum(axis=(0, 1, 2))
                dx = dy * (n.params["gamma"] * inv)
            grads[(n.id, "gamma")] = dgm
            grads[(n.id, "beta")] = dbt
            dins = [dx]
        elif k is Kind.RELU:
            dins = [dy * (a > 0)]
        elif k is Kind.POOL:
            dins = [ops.maxpool2_backward(dy, caches[n.id], a.shape)]
        elif k is Kind.DROPOUT:
            mask = caches.get(n.id)
            dins = [dy if mask is None else dy * mask]
        elif k is Kind.CONCAT:
            sizes = np.cumsum([vals[s].shape[-1] for s in n.inputs])[:-1]
            dins = np.split(dy, sizes, axis=-1)
        elif k is Kind.SOFTMAX:
            p = vals[n.id]
            dins = [p * (dy - (dy * p).sum(axis=-1, keepdims=True))]
        else:  # pragma: no cover
            raise ValueError(k)
        for src, d in zip(n.inputs, dins):
            if src in dout:
                dout[src] = dout[src] + d
            else:
                dout[src] = d
    return grads
