"""Static per-layer FLOPS and parameter analysis.

Only convolutions and transposed convolutions are counted:
``FLOPS = o_h * o_w * o_f * k_h * k_w * i_c * 2`` (one MAC = two FLOPS),
scaled by 1/4 for stride-2 transposed convolutions, and
``params = o_f * k_h * k_w * i_c``. Bias, BN, pooling and softmax are left out
of the totals; :func:`exact_ops` counts them separately.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import DimensionError
from .netgraph.graph import CONV_KINDS, Kind, NetGraph

MIB = 1024 * 1024


@dataclass
class LayerRecord:
    id: str
    kind: str
    o_h: int = 0
    o_w: int = 0
    o_f: int = 0
    k_h: int = 0
    k_w: int = 0
    i_c: int = 0
    flops: int = 0
    params: int = 0


def layer_flops(rec: LayerRecord) -> int:
    if rec.kind not in (Kind.CONV.value, Kind.TCONV.value):
        return 0
    if min(rec.o_h, rec.o_w, rec.o_f, rec.k_h, rec.k_w, rec.i_c) <= 0:
        raise DimensionError(f"{rec.id}: unresolved shape")
    macs = rec.o_h * rec.o_w * rec.o_f * rec.k_h * rec.k_w * rec.i_c
    if rec.kind == Kind.TCONV.value:
        return macs * 2 // 4
    return macs * 2


def layer_params(rec: LayerRecord) -> int:
    if rec.kind not in (Kind.CONV.value, Kind.TCONV.value):
        return 0
    if min(rec.o_f, rec.k_h, rec.k_w, rec.i_c) <= 0:
        raise DimensionError(f"{rec.id}: unresolved shape")
    return rec.o_f * rec.k_h * rec.k_w * rec.i_c


@dataclass
class ComplexityReport:
    input_shape: tuple[int, int, int]
    records: list[LayerRecord]

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.records)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.records)

    def size_bytes(self, bytes_per_element: int = 4) -> int:
        return self.params * bytes_per_element

    def by_id(self) -> dict[str, LayerRecord]:
        return {r.id: r for r in self.records}

    def conv_records(self) -> list[LayerRecord]:
        return [r for r in self.records if r.kind in (Kind.CONV.value, Kind.TCONV.value)]

    def table(self) -> str:
        head = f"{'layer':<12}{'kind':<18}{'o_h':>5}{'o_w':>5}{'o_f':>6}{'k':>5}{'i_c':>6}{'MFLOPS':>12}{'params':>12}"
        lines = [head, "-" * len(head)]
        for r in self.conv_records():
            lines.append(
                f"{r.id:<12}{r.kind:<18}{r.o_h:>5}{r.o_w:>5}{r.o_f:>6}{f'{r.k_h}x{r.k_w}':>5}{r.i_c:>6}"
                f"{r.flops / 1e6:>12.2f}{r.params:>12,}"
            )
        lines.append("-" * len(head))
        lines.append(f"total GFLOPS {self.flops / 1e9:.2f}   Mparams {self.params / 1e6:.2f}   "
                     f"size FP32 {self.size_bytes(4) / MIB:.2f} MiB   INT8 {self.size_bytes(1) / MIB:.2f} MiB")
        return "\n".join(lines)

    def records_text(self) -> str:
        """One comma-separated record per line, header first."""
        fields = list(LayerRecord.__dataclass_fields__)
        rows = [",".join(fields)]
        for r in self.records:
            d = asdict(r)
            rows.append(",".join(str(d[f]) for f in fields))
        return "\n".join(rows)


def analyze(g: NetGraph, input_shape=None) -> ComplexityReport:
    shape = tuple(input_shape or g.input_shape)
    m = 2 ** g.depth
    if shape[0] % m or shape[1] % m:
        raise DimensionError(f"input {shape[0]}x{shape[1]} not divisible by {m}")
    shapes = g.shapes(shape)
    records = []
    for n in g:
        oh, ow, oc = shapes[n.id]
        rec = LayerRecord(n.id, n.kind.value, oh, ow, oc)
        if n.kind in CONV_KINDS:
            rec.k_h, rec.k_w = n.kernel
            rec.i_c = n.in_channels
            rec.flops = layer_flops(rec)
            rec.params = layer_params(rec)
        records.append(rec)
    return ComplexityReport(shape, records)


# elementwise costs per output element of the ops the headline totals leave out
_ELEMENT_COST = {Kind.BN: 2, Kind.RELU: 1, Kind.NORM: 2, Kind.SOFTMAX: 4}


def exact_ops(g: NetGraph, input_shape=None) -> dict[str, int]:
    """Operation counts of the non-convolution work (bias adds, BN, activations, pooling, softmax)."""
    shape = tuple(input_shape or g.input_shape)
    shapes = g.shapes(shape)
    counts = {"bias": 0, "batchnorm": 0, "relu": 0, "pool": 0, "norm": 0, "softmax": 0}
    for n in g:
        oh, ow, oc = shapes[n.id]
        elems = oh * ow * oc
        if n.kind in CONV_KINDS:
            counts["bias"] += elems
        elif n.kind is Kind.BN:
            counts["batchnorm"] += elems * _ELEMENT_COST[Kind.BN]
        elif n.kind is Kind.RELU:
            counts["relu"] += elems
        elif n.kind is Kind.POOL:
            counts["pool"] += elems * 3  # three comparisons per 2x2 window
        elif n.kind is Kind.NORM:
            counts["norm"] += elems * _ELEMENT_COST[Kind.NORM]
        elif n.kind is Kind.SOFTMAX:
            counts["softmax"] += elems * _ELEMENT_COST[Kind.SOFTMAX]
    counts["total"] = sum(counts.values())
    return counts
