"""Slow, independent reference implementations used as test oracles."""

import numpy as np

from hsicomp.netgraph.graph import INPUT, Kind, LayerNode, NetGraph


def kept_filters(f, r):
    """Filters left after rounding r*f half-up, never below one."""
    return f - min(f - 1, int(np.floor(r * f + 0.5 + 1e-9)))


def naive_conv(x, w, b):
    """Same-padded stride-1 conv of one (H, W, C) image by explicit loops."""
    h, wd, c = x.shape
    o, kh, kw, _ = w.shape
    ph, pw = kh // 2, kw // 2
    y = np.zeros((h, wd, o), dtype=np.float64)
    for r in range(h):
        for s in range(wd):
            for f in range(o):
                acc = float(b[f])
                for a in range(kh):
                    for bb in range(kw):
                        rr, ss = r + a - ph, s + bb - pw
                        if 0 <= rr < h and 0 <= ss < wd:
                            acc += float(np.dot(x[rr, ss].astype(np.float64), w[f, a, bb].astype(np.float64)))
                y[r, s, f] = acc
    return y


def naive_tconv(x, w, b):
    """2x2 stride-2 transposed conv by scattering every input pixel."""
    h, wd, c = x.shape
    o, kh, kw, _ = w.shape
    y = np.zeros((h * kh, wd * kw, o), dtype=np.float64) + b.astype(np.float64)
    for r in range(h):
        for s in range(wd):
            for a in range(kh):
                for bb in range(kw):
                    y[r * kh + a, s * kw + bb] += w[:, a, bb, :].astype(np.float64) @ x[r, s].astype(np.float64)
    return y


def _shapes(g, input_shape):
    """Shape inference written independently of NetGraph.shapes."""
    shp = {INPUT: tuple(input_shape)}
    for n in g:
        h, w, c = shp[n.inputs[0]]
        if n.kind is Kind.CONV:
            shp[n.id] = (h, w, n.params["weight"].shape[0])
        elif n.kind is Kind.TCONV:
            shp[n.id] = (2 * h, 2 * w, n.params["weight"].shape[0])
        elif n.kind is Kind.POOL:
            shp[n.id] = (h // 2, w // 2, c)
        elif n.kind is Kind.CONCAT:
            shp[n.id] = (h, w, sum(shp[s][2] for s in n.inputs))
        else:
            shp[n.id] = (h, w, c)
    return shp


def loop_nest_flops(g, input_shape):
    """(flops, params) by counting multiply-accumulates tap by tap."""
    shp = _shapes(g, input_shape)
    flops = params = 0
    for n in g:
        if n.kind not in (Kind.CONV, Kind.TCONV):
            continue
        o, kh, kw, ic = n.params["weight"].shape
        ih, iw, in_c = shp[n.inputs[0]]
        assert in_c == ic
        if n.kind is Kind.CONV:
            # every output pixel visits all kh*kw taps (padding taps included)
            taps = np.zeros((ih, iw), dtype=np.int64)
            for a in range(kh):
                for b in range(kw):
                    taps += 1
            macs = int(taps.sum()) * ic * o
        else:
            oh, ow = ih * kh, iw * kw
            hits = np.zeros((oh, ow), dtype=np.int64)
            for a in range(kh):
                for b in range(kw):
                    hits[a::kh, b::kw] += 1
            macs = int(hits.sum()) * ic * o
        flops += 2 * macs
        params += o * kh * kw * ic
    return flops, params


def toy_chain(widths, in_bands=3, classes=2, hw=(4, 4), seed=0):
    """Plain stack of 3x3 convs with ReLUs, then a 1x1 classifier."""
    rng = np.random.default_rng(seed)
    nodes, src, cin = {}, INPUT, in_bands
    for i, f in enumerate(widths):
        w = rng.normal(size=(f, 3, 3, cin)).astype(np.float32)
        nodes[f"cnv_{i}"] = LayerNode(f"cnv_{i}", Kind.CONV, [src], {"weight": w, "bias": np.zeros(f, np.float32)})
        nodes[f"relu_{i}"] = LayerNode(f"relu_{i}", Kind.RELU, [f"cnv_{i}"])
        src, cin = f"relu_{i}", f
    w = rng.normal(size=(classes, 1, 1, cin)).astype(np.float32)
    nodes["cnv_out"] = LayerNode("cnv_out", Kind.CONV, [src], {"weight": w, "bias": np.zeros(classes, np.float32)})
    nodes["softmax"] = LayerNode("softmax", Kind.SOFTMAX, ["cnv_out"])
    g = NetGraph(nodes, (hw[0], hw[1], in_bands), classes, 0)
    g.validate()
    return g


def exhaustive_best(curves, model, target):
    """(budget, ratios) of the feasible scheme with the least worst-layer drop, most FLOPS removed on ties, largest ratios after that."""
    layers = model.prunable
    ratios = curves.ratios
    grids = np.meshgrid(*[np.arange(len(ratios))] * len(layers), indexing="ij")
    idx = {l: gr.ravel() for l, gr in zip(layers, grids)}
    kept = {l: np.array([kept_filters(model.filters[l], r) for r in ratios])[idx[l]] for l in layers}
    flops = np.zeros(idx[layers[0]].size, dtype=np.int64)
    for l in model.layers:
        k_out = kept.get(l, model.filters[l])
        k_in = sum(kept[s] if s in kept else (model.filters[s] if isinstance(s, str) else s)
                   for s in model.sources[l])
        flops += model.coef[l] * k_out * k_in
    worst = np.zeros(flops.size)
    for l in layers:
        drops = np.where(np.asarray(ratios) > 0, curves.drops(l), 0.0)
        worst = np.maximum(worst, drops[idx[l]])
    ok = flops <= target * model.total
    best = worst[ok].min()
    cand = np.flatnonzero(ok & (worst == best))
    # equal FLOPS can come from different ratios (rounding), so prefer the larger ratios
    rsum = sum(idx[l] for l in layers)
    pick = cand[np.lexsort((-rsum[cand], flops[cand]))[0]]
    return best, {l: ratios[idx[l][pick]] for l in layers}
