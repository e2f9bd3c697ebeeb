import numpy as np
import pytest

from hsicomp.complexity import LayerRecord, analyze, exact_ops, layer_flops, layer_params
from hsicomp.errors import DimensionError
from hsicomp.netgraph import build_unet
from hsicomp.pruning import RATIOS, apply_scheme
from oracles import loop_nest_flops


def test_reference_network_totals():
    rep = analyze(build_unet(), (192, 384, 25))
    assert rep.params == 31_093_952
    assert round(rep.flops / 1e9, 2) == 34.53
    flops, params = loop_nest_flops(build_unet(), (192, 384, 25))
    assert (rep.flops, rep.params) == (flops, params)
    assert rep.size_bytes(4) == 4 * rep.params and rep.size_bytes(1) == rep.params


def test_layer_formulas_by_hand():
    conv = LayerRecord("c", "Conv2D", 4, 6, 8, 3, 3, 2)
    assert layer_flops(conv) == 4 * 6 * 8 * 9 * 2 * 2
    assert layer_params(conv) == 8 * 9 * 2
    tconv = LayerRecord("t", "TransposedConv2D", 8, 12, 4, 2, 2, 8)
    assert layer_flops(tconv) == 8 * 12 * 4 * 4 * 8 * 2 // 4
    assert layer_flops(LayerRecord("r", "ReLU", 4, 4, 4)) == 0
    with pytest.raises(DimensionError):
        layer_flops(LayerRecord("c", "Conv2D", 4, 0, 8, 3, 3, 2))


def test_first_layer_by_hand():
    rep = analyze(build_unet(), (192, 384, 25))
    rec = rep.by_id()["cnv_0"]
    assert rec.flops == 192 * 384 * 32 * 3 * 3 * 25 * 2
    assert rep.by_id()["cnv_out"].params == 5 * 32


def test_random_graphs_match_loop_nest_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        depth = int(rng.integers(1, 4))
        g = build_unet(depth, int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(2, 6)),
                       seed=int(rng.integers(1000)))
        scheme = {lid: float(rng.choice(RATIOS)) for lid in g.prunable()}
        g, _ = apply_scheme(g, scheme)
        m = 2 ** depth
        shape = (m * int(rng.integers(1, 4)), m * int(rng.integers(1, 4)), g.input_shape[2])
        rep = analyze(g, shape)
        assert (rep.flops, rep.params) == loop_nest_flops(g, shape)


def test_flops_scale_with_area():
    g = build_unet(2, 4, 3, 3)
    a = analyze(g, (8, 8, 3)).flops
    assert analyze(g, (16, 8, 3)).flops == 2 * a
    assert analyze(g, (16, 16, 3)).flops == 4 * a


def test_indivisible_input_rejected():
    with pytest.raises(DimensionError):
        analyze(build_unet(3, 4, 3, 3), (12, 16, 3))


def test_table_and_records_text():
    rep = analyze(build_unet(1, 2, 3, 2), (4, 4, 3))
    lines = rep.records_text().splitlines()
    assert lines[0].startswith("id,kind")
    assert len(lines) == len(rep.records) + 1
    assert "total GFLOPS" in rep.table()


def test_exact_ops_counts_the_rest():
    g = build_unet(1, 2, 3, 2)
    ops = exact_ops(g, (4, 4, 3))
    assert ops["pool"] == 2 * 2 * 2 * 3
    assert ops["softmax"] == 4 * 4 * 2 * 4
    assert ops["total"] == sum(v for k, v in ops.items() if k != "total")
