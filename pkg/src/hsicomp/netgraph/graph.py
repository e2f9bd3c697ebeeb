"""Layer DAG for U-Net style encoder-decoders, plus (de)serialization."""

from __future__ import annotations

import copy
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DimensionError, FormatError, StructureError

INPUT = "input"


class Kind(str, enum.Enum):
    CONV = "Conv2D"
    TCONV = "TransposedConv2D"
    NORM = "DepthwiseNorm"
    BN = "BatchNorm"
    RELU = "ReLU"
    POOL = "MaxPool2D"
    DROPOUT = "Dropout"
    CONCAT = "Concat"
    SOFTMAX = "Softmax"


CONV_KINDS = (Kind.CONV, Kind.TCONV)

# serialization order of each kind's tensors
PARAM_NAMES = {
    Kind.CONV: ("weight", "bias"),
    Kind.TCONV: ("weight", "bias"),
    Kind.NORM: ("weight", "bias"),
    Kind.BN: ("gamma", "beta", "mean", "var"),
}
TRAINABLE = {
    Kind.CONV: ("weight", "bias"),
    Kind.TCONV: ("weight", "bias"),
    Kind.BN: ("gamma", "beta"),
}


@dataclass
class LayerNode:
    id: str
    kind: Kind
    inputs: list[str]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    @property
    def filters(self) -> int:
        """Output channel count of a conv-kind node."""
        return self.params["weight"].shape[0]

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[3]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.params["weight"].shape[1:3]


@dataclass
class NetGraph:
    nodes: dict[str, LayerNode]  # insertion order is a topological order
    input_shape: tuple[int, int, int]
    classes: int
    depth: int

    def __iter__(self):
        return iter(self.nodes.values())

    def __getitem__(self, node_id: str) -> LayerNode:
        return self.nodes[node_id]

    @property
    def topo_order(self) -> list[str]:
        return list(self.nodes)

    @property
    def output(self) -> str:
        return next(n.id for n in self if n.kind is Kind.SOFTMAX)

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self if node_id in n.inputs]

    def conv_nodes(self) -> list[LayerNode]:
        return [n for n in self if n.kind in CONV_KINDS]

    def prunable(self) -> list[str]:
        """Conv-kind layers except the classifier, in graph order."""
        return [n.id for n in self.conv_nodes() if n.id != "cnv_out"]

    def copy(self) -> "NetGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetGraph":
        g = self.copy()
        for n in g:
            for k, v in n.params.items():
                n.params[k] = v.astype(dtype)
        return g

    @property
    def dtype(self):
        for n in self:
            for v in n.params.values():
                return v.dtype
        return np.dtype(np.float32)

    def trainable(self):
        """Yield (node_id, name, array) for every trainable tensor."""
        for n in self:
            for name in TRAINABLE.get(n.kind, ()):
                yield n.id, name, n.params[name]

    def param_count(self) -> int:
        return sum(v.size for n in self for v in n.params.values())

    def validate(self) -> None:
        seen = {INPUT}
        softmax = []
        for n in self:
            if n.id == INPUT or n.id in seen:
                raise StructureError(f"duplicate node id {n.id!r}")
            for src in n.inputs:
                if src not in seen:
                    raise StructureError(f"{n.id}: input {src!r} is undefined or not topologically earlier")
            want = 2 if n.kind is Kind.CONCAT else 1
            if (n.kind is Kind.CONCAT and len(n.inputs) < 2) or (n.kind is not Kind.CONCAT and len(n.inputs) != want):
                raise StructureError(f"{n.id}: wrong number of inputs for {n.kind.value}")
            if n.kind is Kind.SOFTMAX:
                softmax.append(n.id)
            seen.add(n.id)
        if len(softmax) != 1:
            raise StructureError(f"expected exactly one Softmax output, found {len(softmax)}")
        # every node must feed the output
        live = {softmax[0]}
        for n in reversed(list(self)):
            if n.id in live:
                live.update(n.inputs)
        dead = [n.id for n in self if n.id not in live]
        if dead:
            raise StructureError(f"nodes unreachable from the output: {dead}")
        if INPUT not in live:
            raise StructureError("output does not depend on the input")
        self.shapes()

    def shapes(self, input_shape=None) -> dict[str, tuple[int, int, int]]:
        """Propagate (H, W, C) through the graph; raises DimensionError naming the node."""
        h, w, c = input_shape or self.input_shape
        out = {INPUT: (h, w, c)}
        for n in self:
            ins = [out[s] for s in n.inputs]
            ih, iw, ic = ins[0]
            if n.kind in CONV_KINDS or n.kind is Kind.NORM:
                cin = n.in_channels if n.kind in CONV_KINDS else n.params["weight"].shape[0]
                if cin != ic:
                    raise DimensionError(f"{n.id}: expects {cin} input channels, producer gives {ic}")
            if n.kind is Kind.CONV:
                out[n.id] = (ih, iw, n.filters)
            elif n.kind is Kind.TCONV:
                out[n.id] = (ih * 2, iw * 2, n.filters)
            elif n.kind is Kind.POOL:
                if ih % 2 or iw % 2:
                    raise DimensionError(f"{n.id}: cannot pool odd size {ih}x{iw}")
                out[n.id] = (ih // 2, iw // 2, ic)
            elif n.kind is Kind.CONCAT:
                if len({(s[0], s[1]) for s in ins}) != 1:
                    raise DimensionError(f"{n.id}: concat inputs differ spatially {ins}")
                out[n.id] = (ih, iw, sum(s[2] for s in ins))
            elif n.kind is Kind.BN:
                if n.params["gamma"].shape[0] != ic:
                    raise DimensionError(f"{n.id}: batch-norm width {n.params['gamma'].shape[0]} vs {ic}")
                out[n.id] = (ih, iw, ic)
            else:
                out[n.id] = (ih, iw, ic)
        return out


# ---------------------------------------------------------------------------
# builder


def glorot_uniform(rng, shape) -> np.ndarray:
    o, kh, kw, i = shape
    limit = np.sqrt(6.0 / (kh * kw * i + kh * kw * o))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class _Builder:
    def __init__(self, rng):
        self.rng = rng
        self.nodes: dict[str, LayerNode] = {}
        self.n_conv = 0
        self.n_tconv = 0
        self.n_bn = 0
        self.n_relu = 0

    def add(self, node: LayerNode) -> str:
        self.nodes[node.id] = node
        return node.id

    def conv(self, src, cin, cout, k=3, name=None):
        if name is None:
            name = f"cnv_{self.n_conv}"
            self.n_conv += 1
        w = glorot_uniform(self.rng, (cout, k, k, cin))
        return self.add(LayerNode(name, Kind.CONV, [src], {"weight": w, "bias": np.zeros(cout, np.float32)}))

    def tconv(self, src, cin, cout):
        name = f"cnv_tr_{self.n_tconv}"
        self.n_tconv += 1
        w = glorot_uniform(self.rng, (cout, 2, 2, cin))
        return self.add(LayerNode(name, Kind.TCONV, [src], {"weight": w, "bias": np.zeros(cout, np.float32)}))

    def bn(self, src, c):
        name = f"bn_{self.n_bn}"
        self.n_bn += 1
        params = {
            "gamma": np.ones(c, np.float32),
            "beta": np.zeros(c, np.float32),
            "mean": np.zeros(c, np.float32),
            "var": np.ones(c, np.float32),
        }
        return self.add(LayerNode(name, Kind.BN, [src], params, {"eps": 1e-5, "momentum": 0.1}))

    def relu(self, src):
        name = f"relu_{self.n_relu}"
        self.n_relu += 1
        return self.add(LayerNode(name, Kind.RELU, [src]))

    def block(self, src, cin, cout):
        """Conv3x3 + BN + ReLU, twice."""
        x = self.relu(self.bn(self.conv(src, cin, cout), cout))
        return self.relu(self.bn(self.conv(x, cout, cout), cout))


def build_unet(depth: int = 5, init_filters: int = 32, in_bands: int = 25, classes: int = 5,
               dropout: float = 0.2, seed: int = 0, input_hw: tuple[int, int] | None = None) -> NetGraph:
    if depth < 1 or init_filters < 1:
        raise ValueError("depth and init_filters must be >= 1")
    b = _Builder(np.random.default_rng(seed))
    x, cin = INPUT, in_bands
    skips = []
    for level in range(depth):
        if level > 0:
            x = b.add(LayerNode(f"pool_{level}", Kind.POOL, [x]))
        f = init_filters * 2 ** level
        x = b.block(x, cin, f)
        skips.append((x, f))  # tap after the second ReLU, before dropout
        x = b.add(LayerNode(f"drop_{level}", Kind.DROPOUT, [x], attrs={"rate": dropout}))
        cin = f
    x = b.add(LayerNode(f"pool_{depth}", Kind.POOL, [x]))
    f = init_filters * 2 ** depth
    x = b.block(x, cin, f)
    cin = f
    for level in reversed(range(depth)):
        skip, f = skips[level]
        up = b.tconv(x, cin, f)
        cat = b.add(LayerNode(f"cat_{level}", Kind.CONCAT, [up, skip]))
        x = b.block(cat, 2 * f, f)
        cin = f
    x = b.conv(x, cin, classes, k=1, name="cnv_out")
    b.add(LayerNode("softmax", Kind.SOFTMAX, [x]))
    m = 2 ** depth
    hw = input_hw or (m, m)
    g = NetGraph(b.nodes, (hw[0], hw[1], in_bands), classes, depth)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# fused symmetric normalization


@dataclass
class NormalizationParams:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if np.any(self.max <= self.min):
            b = int(np.argmax(self.max <= self.min))
            raise DimensionError(f"degenerate channel {b}: max {self.max[b]} <= min {self.min[b]}")

    @property
    def weight(self) -> np.ndarray:
        return 2.0 / (self.max - self.min)

    @property
    def bias(self) -> np.ndarray:
        return 2.0 * self.min / (self.min - self.max) - 1.0


def fuse_symmetric_norm(g: NetGraph, p: NormalizationParams) -> NetGraph:
    """Insert a depthwise 1x1 layer computing 2(x-min)/(max-min) - 1 after the input."""
    if any(n.kind is Kind.NORM for n in g):
        raise StructureError("graph already contains a DepthwiseNorm layer")
    bands = g.input_shape[2]
    if p.min.shape != (bands,):
        raise DimensionError(f"normalization has {p.min.size} channels, input has {bands}")
    out = g.copy()
    dtype = g.dtype
    norm = LayerNode("norm", Kind.NORM, [INPUT],
                     {"weight": p.weight.astype(dtype), "bias": p.bias.astype(dtype)})
    for n in out:
        n.inputs = ["norm" if s == INPUT else s for s in n.inputs]
    out.nodes = {"norm": norm, **out.nodes}
    return out


# ---------------------------------------------------------------------------
# model directory: ``graph`` (JSON manifest) + ``weights.bin``

MANIFEST = "graph"
WEIGHTS = "weights.bin"


def save(g: NetGraph, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    nodes = []
    blob = bytearray()
    for n in g:
        names = PARAM_NAMES.get(n.kind, ())
        nodes.append({
            "id": n.id,
            "kind": n.kind.value,
            "inputs": list(n.inputs),
            "attrs": n.attrs,
            "params": [{"name": k, "shape": list(n.params[k].shape)} for k in names],
        })
        for k in names:
            arr = np.ascontiguousarray(n.params[k], dtype="<f4")
            blob += struct.pack("<Q", arr.size)
            blob += arr.tobytes()
    manifest = {
        "format": "hsicomp-graph",
        "version": 1,
        "input_shape": list(g.input_shape),
        "classes": g.classes,
        "depth": g.depth,
        "nodes": nodes,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))
    (d / WEIGHTS).write_bytes(bytes(blob))


def load(path) -> NetGraph:
    d = Path(path)
    mpath, wpath = d / MANIFEST, d / WEIGHTS
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError("missing graph manifest", str(mpath)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno} col {exc.colno}", str(mpath)) from None
    try:
        blob = wpath.read_bytes()
    except FileNotFoundError:
        raise FormatError("missing weights blob", str(wpath)) from None
    if manifest.get("format") != "hsicomp-graph":
        raise FormatError("not a graph manifest", str(mpath))
    pos = 0
    nodes = {}
    try:
        for i, spec in enumerate(manifest["nodes"]):
            kind = Kind(spec["kind"])
            params = {}
            names = [p["name"] for p in spec["params"]]
            if tuple(names) != PARAM_NAMES.get(kind, ()):
                raise FormatError(f"unexpected tensors {names}", f"{mpath}: layer {spec['id']}")
            for p in spec["params"]:
                shape = tuple(int(s) for s in p["shape"])
                where = f"{wpath}: layer {spec['id']}.{p['name']} at byte {pos}"
                if pos + 8 > len(blob):
                    raise FormatError("truncated weights blob", where)
                (count,) = struct.unpack_from("<Q", blob, pos)
                if count != int(np.prod(shape, dtype=np.int64)):
                    raise FormatError(f"blob holds {count} elements, manifest shape {shape}", where)
                pos += 8
                if pos + 4 * count > len(blob):
                    raise FormatError("truncated weights blob", where)
                arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
                params[p["name"]] = arr.astype(np.float32)
                pos += 4 * count
            nodes[spec["id"]] = LayerNode(spec["id"], kind, list(spec["inputs"]), params, dict(spec["attrs"]))
        g = NetGraph(nodes, tuple(manifest["input_shape"]), int(manifest["classes"]), int(manifest["depth"]))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest entry: {exc!r}", str(mpath)) from None
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after last tensor", str(wpath))
    try:
        g.validate()
    except (StructureError, DimensionError) as exc:
        raise FormatError(f"inconsistent graph: {exc}", str(mpath)) from None
    return g


def graphs_equal(a: NetGraph, b: NetGraph) -> bool:
    """Structural and bitwise parameter equality."""
    if (a.input_shape, a.classes, a.depth) != (b.input_shape, b.classes, b.depth):
        return False
    if list(a.nodes) != list(b.nodes):
        return False
    for na, nb in zip(a, b):
        if (na.kind, na.inputs, na.attrs) != (nb.kind, nb.inputs, nb.attrs):
            return False
        if set(na.params) != set(nb.params):
            return False
        for k in na.params:
            x, y = na.params[k], nb.params[k]
            if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                return False
    return True
