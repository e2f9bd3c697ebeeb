"""Post-training INT8 quantization with power-of-two per-tensor scales.

Every scale is stored as an integer exponent ``e`` (scale ``2**e``), so scales
are exact by construction. Simulated inference runs the float graph in f64 on
dequantized tensors: with power-of-two scales every product ``q_x * q_w`` is an
exact multiple of ``2**(e_x + e_w)`` and the f64 sums reproduce integer
accumulation bit for bit (as long as they stay below 2**53, far beyond i32).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import boundary_mask
from .errors import FormatError, QuantizationError, StructureError
from .netgraph.engine import run
from .netgraph.graph import CONV_KINDS, INPUT, Kind, LayerNode, NetGraph

DEFAULT_EXPONENT = -7  # used for all-zero tensors


class Mode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    AFFINE = "affine"


@dataclass(frozen=True)
class QuantParams:
    exponent: int
    zero_point: int = 0
    mode: Mode = Mode.SYMMETRIC
    bits: int = 8

    def __post_init__(self):
        if not isinstance(self.exponent, (int, np.integer)):
            raise QuantizationError(f"exponent must be an integer, got {self.exponent!r}")
        object.__setattr__(self, "exponent", int(self.exponent))
        object.__setattr__(self, "zero_point", int(self.zero_point))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.SYMMETRIC and self.zero_point != 0:
            raise QuantizationError("symmetric quantization requires zero_point 0")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise QuantizationError(f"zero point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @property
    def scale(self) -> float:
        return math.ldexp(1.0, self.exponent)

    @property
    def qmin(self) -> int:
        full = -(1 << (self.bits - 1))
        return full + 1 if self.mode is Mode.SYMMETRIC else full

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    @property
    def integer_bits(self) -> int:
        """Bits left of the binary point in the signed fixed-point code (may be negative)."""
        return self.bits - 1 + self.exponent

    def quantize(self, x) -> np.ndarray:
        q = np.rint(np.ldexp(np.asarray(x, dtype=np.float64), -self.exponent)) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(np.int32)

    def dequantize(self, q) -> np.ndarray:
        return np.ldexp(np.asarray(q, dtype=np.float64) - self.zero_point, self.exponent)

    def fake(self, x) -> np.ndarray:
        return self.dequantize(self.quantize(x))

    def to_dict(self) -> dict:
        return {"exponent": self.exponent, "zero_point": self.zero_point, "mode": self.mode.value, "bits": self.bits}


# ---------------------------------------------------------------------------
# scale selection


def _ceil_log2(v: float) -> int:
    m, e = math.frexp(v)  # v = m * 2**e, 0.5 <= m < 1
    return e - 1 if m == 0.5 else e


def minmax_symmetric(lo: float, hi: float, bits: int = 8) -> QuantParams:
    """Smallest power-of-two scale with ``qmax * scale >= max|x|``."""
    peak = max(abs(lo), abs(hi))
    if peak == 0:
        return QuantParams(DEFAULT_EXPONENT, 0, Mode.SYMMETRIC, bits)
    qmax = (1 << (bits - 1)) - 1
    e = _ceil_log2(peak / qmax)
    while qmax * math.ldexp(1.0, e - 1) >= peak:
        e -= 1
    while qmax * math.ldexp(1.0, e) < peak:
        e += 1
    return QuantParams(e, 0, Mode.SYMMETRIC, bits)


def affine_for(lo: float, hi: float, exponent: int, bits: int = 8, cover: bool = False) -> QuantParams:
    """Affine params at a given exponent; ``cover`` rounds the zero point so ``lo`` stays representable."""
    qmin, qmax = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    shift = min(lo, 0.0) / math.ldexp(1.0, exponent)
    zp = qmin - (math.floor(shift) if cover else round(shift))
    return QuantParams(exponent, int(np.clip(zp, qmin, qmax)), Mode.AFFINE, bits)


def minmax_affine(lo: float, hi: float, bits: int = 8) -> QuantParams:
    """Smallest power-of-two scale whose shifted integer range covers ``[min(lo,0), max(hi,0)]``."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi == lo:
        return QuantParams(DEFAULT_EXPONENT, -(1 << (bits - 1)), Mode.AFFINE, bits)
    e = _ceil_log2((hi - lo) / ((1 << bits) - 1))
    while True:
        p = affine_for(lo, hi, e, bits, cover=True)
        if p.dequantize(p.qmin) <= lo + 1e-12 * abs(lo) and p.dequantize(p.qmax) >= hi:
            return p
        e += 1


def minmax(lo, hi, mode: Mode, bits=8) -> QuantParams:
    return minmax_symmetric(lo, hi, bits) if Mode(mode) is Mode.SYMMETRIC else minmax_affine(lo, hi, bits)


def candidates(lo, hi, mode: Mode, window: int = 4, bits: int = 8) -> list[QuantParams]:
    """Min-MSE candidate grid: the Min-Max exponent and ``window`` finer ones."""
    base = minmax(lo, hi, mode, bits)
    out = []
    for e in range(base.exponent - window, base.exponent + 1):
        out.append(QuantParams(e, 0, Mode.SYMMETRIC, bits) if Mode(mode) is Mode.SYMMETRIC
                   else affine_for(lo, hi, e, bits))
    return out


def sse(p: QuantParams, x: np.ndarray) -> float:
    d = p.fake(x) - x
    return float(np.dot(d.ravel(), d.ravel()))


def min_mse(x: np.ndarray, mode: Mode, window: int = 4, bits: int = 8) -> QuantParams:
    x = np.asarray(x, dtype=np.float64)
    cands = candidates(float(x.min()), float(x.max()), mode, window, bits)
    errs = [sse(p, x) for p in cands]
    return cands[int(np.argmin(errs))]  # ties go to the finer scale


# ---------------------------------------------------------------------------
# graph transforms


def fold_bn(g: NetGraph) -> NetGraph:
    """Absorb every BN into the conv feeding it; the BN nodes disappear."""
    out = g.copy()
    nodes = dict(out.nodes)
    rename = {}
    for n in g:
        if n.kind is not Kind.BN:
            continue
        src = n.inputs[0]
        if src == INPUT or g[src].kind not in CONV_KINDS:
            raise StructureError(f"{n.id} is not preceded by a convolution")
        if g.consumers(src) != [n.id]:
            raise StructureError(f"{src} feeds more than the batch norm {n.id}")
        conv = nodes[src]
        p = n.params
        a = p["gamma"].astype(np.float64) / np.sqrt(p["var"].astype(np.float64) + n.attrs.get("eps", 1e-5))
        w, b = conv.params["weight"], conv.params["bias"]
        conv.params["weight"] = (w.astype(np.float64) * a[:, None, None, None]).astype(w.dtype)
        conv.params["bias"] = ((b.astype(np.float64) - p["mean"]) * a + p["beta"]).astype(b.dtype)
        del nodes[n.id]
        rename[n.id] = src
    for node in nodes.values():
        node.inputs = [rename.get(s, s) for s in node.inputs]
    out.nodes = nodes
    out.validate()
    return out


def equalization_pairs(g: NetGraph) -> list[tuple[str, str]]:
    """(a, b) with a -> ReLU -> b and single consumers along the chain."""
    pairs = []
    for n in g:
        if n.kind is not Kind.CONV:
            continue
        cons = g.consumers(n.id)
        if len(cons) != 1 or g[cons[0]].kind is not Kind.RELU:
            continue
        after = g.consumers(cons[0])
        if len(after) == 1 and g[after[0]].kind in CONV_KINDS:
            pairs.append((n.id, after[0]))
    return pairs


def equalize_pair(a: LayerNode, b: LayerNode) -> np.ndarray:
    """Rescale shared channels in place; returns the per-channel factors."""
    wa, ba, wb = a.params["weight"], a.params["bias"], b.params["weight"]
    r1 = np.maximum(np.abs(wa).reshape(wa.shape[0], -1).max(axis=1), np.abs(ba)).astype(np.float64)
    r2 = np.abs(wb).transpose(3, 0, 1, 2).reshape(wb.shape[3], -1).max(axis=1).astype(np.float64)
    s = np.ones_like(r1)
    ok = (r1 > 0) & (r2 > 0)
    s[ok] = np.sqrt(r1[ok] / r2[ok])
    a.params["weight"] = (wa / s[:, None, None, None]).astype(wa.dtype)
    a.params["bias"] = (ba / s).astype(ba.dtype)
    b.params["weight"] = (wb * s).astype(wb.dtype)
    return s


def cross_layer_equalize(g: NetGraph, passes: int = 1) -> NetGraph:
    if any(n.kind is Kind.BN for n in g):
        raise StructureError("fold batch norms before cross-layer equalization")
    out = g.copy()
    pairs = equalization_pairs(out)
    for _ in range(passes):
        for a, b in pairs:
            equalize_pair(out[a], out[b])
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass
class Policy:
    input_mode: Mode = Mode.SYMMETRIC
    input_method: str = "minmax"
    weight_method: str = "mse"
    bias_method: str = "minmax"
    activation_mode: Mode = Mode.AFFINE
    activation_method: str = "mse"
    window: int = 4
    input_range: tuple[float, float] | None = None  # fixed range instead of observed data

    @classmethod
    def fused(cls, clip_max: float | None = None) -> "Policy":
        """Raw-reflectance input: affine over ``[0, clip_max]``."""
        return cls(input_mode=Mode.AFFINE, input_range=None if clip_max is None else (0.0, clip_max))


def activation_boundaries(g: NetGraph) -> list[str]:
    """Tensors quantized on the way between layers.

    Convs directly followed by ReLU are fused with it, so only the ReLU output
    is a boundary. Pooling and dropout keep values on their input grid.
    """
    out = [INPUT]
    for n in g:
        if n.kind in CONV_KINDS:
            cons = g.consumers(n.id)
            if not (len(cons) == 1 and g[cons[0]].kind is Kind.RELU):
                out.append(n.id)
        elif n.kind in (Kind.RELU, Kind.NORM, Kind.CONCAT):
            out.append(n.id)
    return out


def _pick(x, mode, method, window):
    x = np.asarray(x, dtype=np.float64)
    if method == "minmax":
        return minmax(float(x.min()), float(x.max()), mode)
    if method == "mse":
        return min_mse(x, mode, window)
    raise QuantizationError(f"unknown calibration method {method!r}")


def _batches(cubes):
    if isinstance(cubes, np.ndarray) and cubes.ndim == 4:
        return [cubes[i:i + 1] for i in range(len(cubes))]
    return [np.asarray(c)[None] if np.ndim(c) == 3 else np.asarray(c) for c in cubes]


def calibrate(g: NetGraph, calib_cubes, policy: Policy = Policy()) -> dict[str, QuantParams]:
    """Quantization parameters for every weight, bias and activation boundary of ``g``."""
    if any(n.kind is Kind.BN for n in g):
        raise QuantizationError("graph still contains batch norms; run fold_bn first")
    batches = _batches(calib_cubes)
    if not batches:
        raise QuantizationError("calibration set is empty")
    params: dict[str, QuantParams] = {}
    for n in g.conv_nodes():
        params[f"{n.id}.weight"] = _pick(n.params["weight"], Mode.SYMMETRIC, policy.weight_method, policy.window)
        params[f"{n.id}.bias"] = _pick(n.params["bias"], Mode.SYMMETRIC, policy.bias_method, policy.window)

    f64 = g.astype(np.float64)
    bounds = activation_boundaries(g)
    modes = {b: (policy.input_mode if b == INPUT else policy.activation_mode) for b in bounds}
    methods = {b: (policy.input_method if b == INPUT else policy.activation_method) for b in bounds}
    lo = {b: math.inf for b in bounds}
    hi = {b: -math.inf for b in bounds}

    def record(node_id, y):
        if node_id in lo:
            lo[node_id] = min(lo[node_id], float(y.min()))
            hi[node_id] = max(hi[node_id], float(y.max()))
        return y

    for x in batches:
        run(f64, x, taps=record)
    if policy.input_range is not None:
        lo[INPUT], hi[INPUT] = map(float, policy.input_range)

    cands = {}
    for b in bounds:
        if methods[b] == "minmax":
            params[b] = minmax(lo[b], hi[b], modes[b])
        elif methods[b] == "mse":
            cands[b] = candidates(lo[b], hi[b], modes[b], policy.window)
        else:
            raise QuantizationError(f"unknown calibration method {methods[b]!r}")
    if cands:
        errs = {b: np.zeros(len(c)) for b, c in cands.items()}

        def accumulate(node_id, y):
            if node_id in cands:
                errs[node_id] += [sse(p, y) for p in cands[node_id]]
            return y

        for x in batches:  # fixed order keeps the f64 sums deterministic
            run(f64, x, taps=accumulate)
        for b, c in cands.items():
            params[b] = c[int(np.argmin(errs[b]))]
    return params


# ---------------------------------------------------------------------------
# simulated inference


def quantized_graph(g: NetGraph, params: dict[str, QuantParams]) -> NetGraph:
    """f64 copy of ``g`` with weights and biases replaced by their dequantized values."""
    q = g.astype(np.float64)
    for n in q.conv_nodes():
        for name in ("weight", "bias"):
            key = f"{n.id}.{name}"
            if key not in params:
                raise QuantizationError(f"no quantization parameters for {key}")
            n.params[name] = params[key].fake(n.params[name])
    return q


def quantized_forward(g: NetGraph, params: dict[str, QuantParams], x, logits: bool = False) -> np.ndarray:
    """Simulated INT8 inference; class probabilities (or logits) per pixel."""
    q = quantized_graph(g, params)
    bounds = activation_boundaries(g)
    missing = [b for b in bounds if b not in params]
    if missing:
        raise QuantizationError(f"no quantization parameters for {missing}")
    bset = set(bounds)

    def fake(node_id, y):
        return params[node_id].fake(y) if node_id in bset else y

    single = np.ndim(x) == 3
    out = g[g.output].inputs[0] if logits else g.output
    vals, _ = run(q, x, taps=fake, stop_at=out)
    y = vals[out]
    return y[0] if single else y


def quantized_predict(g, params, x) -> np.ndarray:
    return quantized_forward(g, params, x, logits=True).argmax(axis=-1)


def int8_conv_reference(qx: np.ndarray, zp_x: int, qw: np.ndarray, qb: np.ndarray, bias_shift: int) -> np.ndarray:
    """Pure-integer same-padded conv of one (H, W, C) int8 image.

    ``qb`` is the bias code, aligned to the accumulator by ``bias_shift``
    (``e_bias - (e_x + e_w)``, which must be non-negative). Returns the i32
    accumulator.
    """
    if bias_shift < 0:
        raise QuantizationError("bias exponent finer than the accumulator")
    o, kh, kw, c = qw.shape
    h, w, _ = qx.shape
    xs = np.full((h + kh - 1, w + kw - 1, c), zp_x, dtype=np.int64)
    xs[kh // 2:kh // 2 + h, kw // 2:kw // 2 + w] = qx
    xs -= zp_x
    acc = np.zeros((h, w, o), dtype=np.int64)
    for a in range(kh):
        for b in range(kw):
            acc += np.einsum("hwc,oc->hwo", xs[a:a + h, b:b + w], qw[:, a, b, :].astype(np.int64))
    acc += qb.astype(np.int64) << bias_shift
    if acc.max(initial=0) > np.iinfo(np.int32).max or acc.min(initial=0) < np.iinfo(np.int32).min:
        raise QuantizationError("i32 accumulator overflow")
    return acc.astype(np.int32)


# ---------------------------------------------------------------------------
# fused-normalization drift


@dataclass
class DriftReport:
    fraction: float
    maps: list[np.ndarray] = field(repr=False, default_factory=list)
    boundary_share: float = float("nan")  # changed pixels lying near a class boundary
    boundary_area: float = float("nan")  # share of all pixels lying near a boundary

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "boundary_share": self.boundary_share,
                "boundary_area": self.boundary_area, "images": len(self.maps)}


def _check_pair(g_explicit: NetGraph, g_fused: NetGraph) -> LayerNode:
    norms = [n for n in g_fused if n.kind is Kind.NORM]
    if len(norms) != 1 or any(n.kind is Kind.NORM for n in g_explicit):
        raise StructureError("expected an explicit graph and its normalization-fused counterpart")
    rest = [n for n in g_fused if n.kind is not Kind.NORM]
    if [n.id for n in rest] != [n.id for n in g_explicit]:
        raise StructureError("fused and explicit graphs have different layers")
    for a in rest:
        b = g_explicit[a.id]
        for k, v in a.params.items():
            if v.shape != b.params[k].shape or not np.array_equal(v, b.params[k]):
                raise StructureError(f"layer {a.id}: parameter {k} differs between the two graphs")
    return norms[0]


def requantization_drift(g_explicit: NetGraph, g_fused: NetGraph, params_e, params_f, eval_cubes,
                         labels=None, radius: int = 2) -> DriftReport:
    """Fraction of pixels whose INT8 argmax differs between explicit and fused normalization.

    ``eval_cubes`` are clipped reflectance cubes (the fused model's input); the
    explicit model sees them after the normalization held by the fused graph.
    Boundaries for the border analysis come from ``labels`` when given, else
    from the explicit model's float prediction. ``params=None`` runs the float
    model instead.
    """
    norm = _check_pair(g_explicit, g_fused)
    w = norm.params["weight"].astype(np.float64)
    b = norm.params["bias"].astype(np.float64)
    maps, changed, near, area, total = [], 0, 0, 0, 0
    for i, x in enumerate(_batches(eval_cubes)):
        xe = x.astype(np.float64) * w + b
        if params_e is None:
            pe = run(g_explicit.astype(np.float64), xe)[0][g_explicit.output].argmax(-1)
        else:
            pe = quantized_predict(g_explicit, params_e, xe)
        if params_f is None:
            pf = run(g_fused.astype(np.float64), x)[0][g_fused.output].argmax(-1)
        else:
            pf = quantized_predict(g_fused, params_f, x)
        diff = pe != pf
        if labels is not None:
            ref = np.asarray(labels[i])[None] if np.ndim(labels[i]) == 2 else np.asarray(labels[i])
        else:
            ref = run(g_explicit, xe.astype(g_explicit.dtype))[0][g_explicit.output].argmax(-1)
        edge = np.stack([boundary_mask(r, radius) for r in ref])
        maps.extend(list(diff))
        changed += int(diff.sum())
        near += int((diff & edge).sum())
        area += int(edge.sum())
        total += diff.size
    if total == 0:
        raise QuantizationError("no evaluation cubes")
    return DriftReport(changed / total, maps, near / changed if changed else float("nan"), area / total)


# ---------------------------------------------------------------------------
# params file


def params_to_text(params: dict[str, QuantParams]) -> str:
    return json.dumps({k: v.to_dict() for k, v in params.items()}, indent=1) + "\n"


def params_from_text(text: str, where="<text>") -> dict[str, QuantParams]:
    try:
        raw = json.loads(text)
        return {k: QuantParams(int(v["exponent"]), int(v["zero_point"]), Mode(v["mode"]), int(v.get("bits", 8)))
                for k, v in raw.items()}
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno}", where) from None
    except (KeyError, TypeError, ValueError, AttributeError, QuantizationError) as exc:
        raise FormatError(f"malformed quantization entry: {exc}", where) from None


def save_params(path, params) -> None:
    Path(path).write_text(params_to_text(params))


def load_params(path) -> dict[str, QuantParams]:
    p = Path(path)
    try:
        return params_from_text(p.read_text(), str(p))
    except FileNotFoundError:
        raise FormatError("missing quantization parameter file", str(p)) from None
