import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsicomp.complexity import analyze
from hsicomp.errors import FormatError, InfeasibleError, IterationError, SchemeError
from hsicomp.netgraph import Kind, build_unet, forward
from hsicomp.pruning import (
    RATIOS,
    FlopsModel,
    IterationConfig,
    PruningScheme,
    SearchResult,
    SensitivityCurve,
    apply_scheme,
    check_gates,
    kept_count,
    param_scaled_slopes,
    pruned_count,
    rank_filters_l1,
    ratio_steps,
    run_iteration,
    search_scheme,
    sensitivity_analysis,
    synthetic_curves,
)
from oracles import exhaustive_best, kept_filters, loop_nest_flops, toy_chain


@pytest.mark.parametrize("f,r,n", [(32, 0.5, 16), (5, 0.5, 3), (5, 0.1, 1), (3, 0.9, 2), (1, 0.9, 0),
                                   (10, 0.0, 0), (64, 0.3, 19)])
def test_pruned_count_examples(f, r, n):
    assert pruned_count(f, r) == n
    assert kept_count(f, r) == f - n


@given(st.integers(1, 2048), st.sampled_from(RATIOS))
def test_kept_count_matches_oracle(f, r):
    assert kept_count(f, r) == kept_filters(f, r) >= 1


@pytest.mark.parametrize("r", [0.15, 1.0, -0.1, 0.95])
def test_off_grid_ratios_rejected(r):
    with pytest.raises(SchemeError):
        ratio_steps(r)


def test_l1_ranking_by_hand():
    w = np.zeros((4, 1, 1, 2), np.float32)
    w[:, 0, 0, 0] = [3, -1, 2, 0.5]
    w[:, 0, 0, 1] = [0, 0, 0, 0.5]
    assert rank_filters_l1(w).tolist() == [1, 3, 2, 0]  # ties keep the lower index first


def test_apply_scheme_keeps_strongest_filters():
    g = build_unet(1, 4, 3, 2, seed=0)
    w = g["cnv_0"].params["weight"]
    w[:] = 1.0
    w[2] *= 0.1
    w[0] *= 0.2
    pruned, mask = apply_scheme(g, {"cnv_0": 0.5})
    assert mask == {"cnv_0": [1, 3]}
    assert pruned["cnv_0"].filters == 2
    assert pruned["bn_0"].params["gamma"].shape == (2,)
    assert pruned["cnv_1"].in_channels == 2
    assert g["cnv_0"].filters == 4  # source untouched


def zeroed_copy(g, scheme, rng):
    """Zero the filters a scheme will remove, so removing them changes nothing."""
    g = g.copy()
    removed = {}
    for lid, r in scheme.items():
        n = g[lid]
        drop = pruned_count(n.filters, r)
        idx = rng.choice(n.filters, size=drop, replace=False)
        n.params["weight"][idx] = 0
        n.params["bias"][idx] = 0
        for c in g.consumers(lid):
            if g[c].kind is Kind.BN:
                g[c].params["gamma"][idx] = 0
                g[c].params["beta"][idx] = 0
        removed[lid] = sorted(set(range(n.filters)) - set(idx.tolist()))
    return g, removed


def test_zero_channel_equivalence_on_random_unets():
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in range(100):
        depth = int(rng.integers(1, 4))
        g = build_unet(depth, int(rng.integers(2, 7)), int(rng.integers(1, 5)), int(rng.integers(2, 5)),
                       seed=t)
        for n in g:
            if n.kind is Kind.BN:
                c = n.params["gamma"].shape[0]
                n.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
                n.params["beta"] = rng.normal(0, 0.3, c).astype(np.float32)
                n.params["mean"] = rng.normal(0, 0.3, c).astype(np.float32)
            elif n.kind in (Kind.CONV, Kind.TCONV):
                n.params["bias"] = rng.normal(0, 0.1, n.filters).astype(np.float32)
        scheme = {l: float(rng.choice(RATIOS)) for l in g.prunable()}
        z, keep = zeroed_copy(g, scheme, rng)
        pruned, mask = apply_scheme(z, scheme)
        assert mask == keep
        m = 2 ** depth
        x = rng.normal(size=(2, m, 2 * m, g.input_shape[2])).astype(np.float32)
        worst = max(worst, float(np.abs(forward(z, x) - forward(pruned, x)).max()))
    assert worst <= 1e-5


def test_reference_schemes_run_and_count_exactly():
    rng = np.random.default_rng(1)
    g = build_unet()
    model = FlopsModel(g, (192, 384, 25))
    for i in range(3):
        scheme = {l: float(rng.choice(RATIOS)) for l in g.prunable()}
        pruned, _ = apply_scheme(g, scheme)
        rep = analyze(pruned, (192, 384, 25))
        assert rep.flops == model.flops(scheme)
        assert (rep.flops, rep.params) == loop_nest_flops(pruned, (192, 384, 25))
        if i == 0:
            x = rng.normal(size=(1, 32, 32, 25)).astype(np.float32)
            assert forward(pruned, x).shape == (1, 32, 32, 5)


def test_flops_model_full_and_cap():
    g = build_unet()
    model = FlopsModel(g, (192, 384, 25))
    assert model.total == analyze(g, (192, 384, 25)).flops
    assert model.ratio({}) == 1.0
    assert model.ratio({l: 0.9 for l in g.prunable()}) < 0.02


@pytest.mark.parametrize("pr", [0.5, 0.6, 0.7, 0.75, 0.8])
def test_search_hits_target_with_synthetic_curves(pr):
    model = FlopsModel(build_unet(), (192, 384, 25))
    res = search_scheme(synthetic_curves(model, param_scaled_slopes(model)), model, pr)
    assert res.achieved <= 1 - pr
    assert abs(res.achieved - (1 - pr)) <= 0.03
    assert res.achieved == pytest.approx(analyze(apply_scheme(model.graph, res.scheme)[0]).flops
                                         / analyze(model.graph).flops)


def random_curves(model, rng, jitter=True):
    curves = {}
    for l in model.prunable:
        steps = rng.exponential(rng.uniform(0.05, 1.0), size=len(RATIOS) - 1)
        curves[l] = list(0.9 - np.concatenate([[0.0], np.cumsum(steps)]) / 100)
    return SensitivityCurve("wiou", 0.9, list(RATIOS), curves)


@pytest.mark.parametrize("seed", range(6))
def test_search_matches_exhaustive_on_toy(seed):
    rng = np.random.default_rng(seed)
    g = toy_chain([8, 6, 10, 4, 12], seed=seed)
    model = FlopsModel(g)
    curves = random_curves(model, rng)
    for pr in (0.3, 0.5, 0.7):
        res = search_scheme(curves, model, pr, exclusion_threshold=100)
        budget, best = exhaustive_best(curves, model, 1 - pr)
        assert res.budget == pytest.approx(budget)
        for l in model.prunable:
            assert abs(res.scheme[l] - best[l]) <= 0.05


def test_identical_layers_get_identical_ratios():
    g = toy_chain([6, 6, 6])
    model = FlopsModel(g)
    same = [0.9 - 0.002 * k for k in range(10)]
    curves = SensitivityCurve("wiou", 0.9, list(RATIOS), {l: same for l in model.prunable})
    res = search_scheme(curves, model, 0.4)
    assert len(set(res.scheme.values())) == 1


def test_search_is_monotone_in_target():
    rng = np.random.default_rng(3)
    model = FlopsModel(build_unet(3, 8, 5, 4, input_hw=(16, 32)))
    curves = random_curves(model, rng)
    prev = None
    for pr in np.arange(0.1, 0.95, 0.05):
        res = search_scheme(curves, model, float(pr))
        if prev is not None:
            assert res.achieved <= prev.achieved
            assert res.budget >= prev.budget
            assert all(res.scheme[l] >= prev.scheme[l] for l in model.prunable)
        prev = res


def test_exclusion_and_infeasibility():
    model = FlopsModel(toy_chain([8, 8, 8]))
    curves = SensitivityCurve("wiou", 0.9, list(RATIOS), {
        "cnv_0": [0.9 - 0.2 * r for r in RATIOS],  # 2 points at the first step
        "cnv_1": [0.9 - 0.001 * r for r in RATIOS],
        "cnv_2": [0.9 - 0.001 * r for r in RATIOS],
    })
    res = search_scheme(curves, model, 0.3, exclusion_threshold=1.0)
    assert res.excluded == ["cnv_0"] and res.scheme["cnv_0"] == 0.0
    with pytest.raises(InfeasibleError) as info:
        search_scheme(curves, model, 0.9, exclusion_threshold=1.0)
    assert 0 < info.value.max_achievable < 0.9
    for bad in (1.0, 1.5, -0.1):
        with pytest.raises(SchemeError):
            search_scheme(curves, model, bad)
    res = search_scheme(curves, model, 0.0)
    assert all(v == 0 for v in res.scheme.values())


def test_scheme_validation_and_text():
    g = build_unet(1, 4, 3, 2)
    s = PruningScheme({"cnv_0": 0.3, "cnv_tr_0": 0.9})
    s.validate(g)
    assert PruningScheme.from_text(s.to_text()) == s
    assert s.locked() == ["cnv_tr_0"]
    for bad in ({"cnv_out": 0.5}, {"nope": 0.1}, {"cnv_0": 0.35}):
        with pytest.raises(SchemeError):
            PruningScheme(bad).validate(g)
    with pytest.raises(SchemeError):
        apply_scheme(g, {"cnv_out": 0.1})
    for text in ("cnv_0\n", "cnv_0 abc\n", "cnv_0 0.25\n"):
        with pytest.raises(FormatError):
            PruningScheme.from_text(text)


def test_curve_text_round_trip():
    model = FlopsModel(toy_chain([4, 4]))
    c = random_curves(model, np.random.default_rng(0))
    back = SensitivityCurve.from_text(c.to_text())
    assert back == c
    with pytest.raises(FormatError):
        SensitivityCurve.from_text("# metric wiou baseline 0.9\nlayer 0.0 0.1\ncnv_0 0.9\n")


def tiny_task(seed=0, n=12):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4, 4, 3)).astype(np.float32)
    y = (x[..., 0] + 0.5 * x[..., 1] > 0).astype(np.int64)
    return x, y


def test_sensitivity_analysis_shape_and_threads():
    g = build_unet(1, 4, 3, 2, seed=1)
    data = tiny_task()
    c1 = sensitivity_analysis(g, data, workers=1)
    c2 = sensitivity_analysis(g, data, workers=3)
    assert c1 == c2
    assert set(c1.curves) == set(g.prunable())
    assert all(v[0] == c1.baseline for v in c1.curves.values())
    with pytest.raises(ValueError):
        sensitivity_analysis(g, (data[0][:0], data[1][:0]))


def test_gates():
    model = FlopsModel(toy_chain([8, 8, 8, 8, 8]))
    curves = SensitivityCurve("wiou", 0.9, list(RATIOS),
                              {l: [0.9 - 0.001 * r for r in RATIOS] for l in model.prunable})
    cfg = IterationConfig()
    ok = SearchResult(PruningScheme({"cnv_0": 0.5, "cnv_1": 0.9, "cnv_2": 0, "cnv_3": 0, "cnv_4": 0}), 0.5, 0.5, 0, [])
    assert check_gates(ok, curves, cfg) == []
    locked = SearchResult(PruningScheme({l: 0.9 for l in model.prunable}), 0.1, 0.1, 0, [])
    assert any("locked" in f for f in check_gates(locked, curves, cfg))
    steep = SensitivityCurve("wiou", 0.9, list(RATIOS),
                             {l: [0.9 - 0.01 * r for r in RATIOS] for l in model.prunable})
    assert any("layer drop" in f for f in check_gates(ok, steep, cfg))


def test_iteration_prunes_and_reports():
    g = build_unet(1, 4, 3, 2, seed=2, dropout=0.0)
    data = tiny_task()
    model = FlopsModel(g)
    curves = synthetic_curves(model, {l: 0.01 for l in model.prunable}, baseline=0.5)
    cfg = IterationConfig(overall_pr=0.5, finetune_epochs=1, model_drop=100, locked_fraction=1.0)
    out, rep = run_iteration(g, data, data, cfg, curves=curves)
    assert rep.flops_ratio <= 0.5
    assert rep.flops_after == analyze(out).flops
    assert rep.attempts[-1]["failure"] is None
    assert "FLOPS ratio" in rep.table()


def test_iteration_gives_up_after_retries():
    g = build_unet(1, 4, 3, 2, seed=2)
    model = FlopsModel(g)
    curves = synthetic_curves(model, {l: 50.0 for l in model.prunable}, baseline=0.9)
    cfg = IterationConfig(overall_pr=0.5, max_retries=2, exclusion_threshold=100)
    with pytest.raises(IterationError) as info:
        run_iteration(g, tiny_task(), tiny_task(), cfg, curves=curves)
    assert len(info.value.attempts) == 3
    assert [a["pr"] for a in info.value.attempts] == [0.5, 0.45, 0.4]
