"""Structured filter pruning for U-Net graphs.

Filters are ranked by L1 norm; removing a filter removes its BN row and the
matching input channel of every consumer, following the channel through
ReLU / pooling / dropout and into the right offset of a concatenation.
Sensitivity analysis prunes one layer at a time; the scheme search picks
per-layer ratios by bisecting a degradation budget until the FLOPS target is
met; :func:`run_iteration` wraps both with the acceptance gates and
finetuning, and :func:`prune_at_init` applies the same search before training.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .complexity import analyze
from .errors import FormatError, InfeasibleError, IterationError, SchemeError
from .netgraph.graph import CONV_KINDS, INPUT, Kind, NetGraph
from .netgraph.train import TrainConfig, predict_batches, score, train

log = logging.getLogger(__name__)

RATIOS = tuple(round(0.1 * k, 1) for k in range(10))
MAX_RATIO = 0.9
PASSTHROUGH = (Kind.RELU, Kind.POOL, Kind.DROPOUT, Kind.BN, Kind.NORM)


# ---------------------------------------------------------------------------
# schemes


def ratio_steps(ratio: float) -> int:
    k = round(ratio * 10)
    if abs(ratio * 10 - k) > 1e-6 or not 0 <= k <= 9:
        raise SchemeError(f"ratio {ratio} is not one of 0.0, 0.1, ..., 0.9")
    return k


def pruned_count(filters: int, ratio: float) -> int:
    """round(ratio * filters) with halves rounded up, leaving at least one filter."""
    k = ratio_steps(ratio)
    n = (2 * k * filters + 10) // 20
    return min(n, filters - 1)


def kept_count(filters: int, ratio: float) -> int:
    return filters - pruned_count(filters, ratio)


class PruningScheme(dict):
    """layer id -> ratio in {0.0, ..., 0.9}."""

    def validate(self, g: NetGraph) -> None:
        prunable = set(g.prunable())
        for layer, r in self.items():
            if layer == "cnv_out":
                raise SchemeError("the classifier layer cnv_out cannot be pruned")
            if layer not in prunable:
                raise SchemeError(f"unknown or non-prunable layer {layer!r}")
            ratio_steps(r)

    def locked(self) -> list[str]:
        return [k for k, v in self.items() if ratio_steps(v) == 9]

    def vector(self, layers) -> list[float]:
        return [float(self.get(l, 0.0)) for l in layers]

    def to_text(self) -> str:
        return "\n".join(f"{k} {v:.1f}" for k, v in self.items()) + "\n"

    @classmethod
    def from_text(cls, text: str, where="<text>") -> "PruningScheme":
        s = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#")[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"line {lineno}: expected '<layer> <ratio>'", where)
            try:
                s[parts[0]] = round(float(parts[1]), 1)
                ratio_steps(float(parts[1]))
            except (ValueError, SchemeError) as exc:
                raise FormatError(f"line {lineno}: {exc}", where) from None
        return s


# ---------------------------------------------------------------------------
# filter ranking and scheme application


def rank_filters_l1(weight: np.ndarray) -> np.ndarray:
    """Filter indices by ascending L1 norm (bias excluded); ties keep lower index first."""
    norms = np.abs(weight.astype(np.float64)).reshape(weight.shape[0], -1).sum(axis=1)
    return np.argsort(norms, kind="stable")


def apply_scheme(g: NetGraph, scheme) -> tuple[NetGraph, dict[str, list[int]]]:
    """Remove the lowest-L1 filters per ``scheme``; returns the pruned graph and kept indices."""
    scheme = PruningScheme(scheme)
    scheme.validate(g)
    shapes = g.shapes()
    out = g.copy()
    mask: dict[str, list[int]] = {}
    chan = {INPUT: np.arange(shapes[INPUT][2])}
    for n in out:
        src = chan[n.inputs[0]]
        if n.kind in CONV_KINDS:
            w = n.params["weight"]
            r = scheme.get(n.id, 0.0)
            drop = pruned_count(w.shape[0], r) if r else 0
            keep = np.sort(rank_filters_l1(w)[drop:])
            n.params["weight"] = np.ascontiguousarray(w[keep][:, :, :, src])
            n.params["bias"] = n.params["bias"][keep].copy()
            chan[n.id] = keep
            if n.id in scheme:
                mask[n.id] = keep.tolist()
        elif n.kind is Kind.BN:
            for k in ("gamma", "beta", "mean", "var"):
                n.params[k] = n.params[k][src].copy()
            chan[n.id] = src
        elif n.kind is Kind.NORM:
            for k in ("weight", "bias"):
                n.params[k] = n.params[k][src].copy()
            chan[n.id] = src
        elif n.kind is Kind.CONCAT:
            parts, offset = [], 0
            for s in n.inputs:
                parts.append(chan[s] + offset)
                offset += shapes[s][2]
            chan[n.id] = np.concatenate(parts)
        else:
            chan[n.id] = src
    out.validate()
    return out, mask


# ---------------------------------------------------------------------------
# fast FLOPS model of hypothetical schemes


class FlopsModel:
    """Conv FLOPS as a function of per-layer kept-filter counts.

    Each conv contributes ``coef * kept_out * kept_in`` where ``kept_in`` sums
    the kept widths of the producers feeding it (through passthrough nodes and
    concatenations).
    """

    def __init__(self, g: NetGraph, input_shape=None):
        self.graph = g
        self.report = analyze(g, input_shape)
        recs = self.report.by_id()
        self.layers = [n.id for n in g.conv_nodes()]
        self.prunable = g.prunable()
        self.filters = {l: recs[l].o_f for l in self.layers}
        self.coef = {}
        for l in self.layers:
            r = recs[l]
            base = r.o_h * r.o_w * r.k_h * r.k_w * 2
            self.coef[l] = base // 4 if r.kind == Kind.TCONV.value else base
        self.sources = {l: self._sources(g[l].inputs[0]) for l in self.layers}
        self.total = self.flops({})

    def _sources(self, node_id):
        if node_id == INPUT:
            return [self.graph.input_shape[2]]
        n = self.graph[node_id]
        if n.kind in CONV_KINDS:
            return [n.id]
        if n.kind is Kind.CONCAT:
            return [s for i in n.inputs for s in self._sources(i)]
        return self._sources(n.inputs[0])

    def kept(self, scheme) -> dict[str, int]:
        return {l: kept_count(self.filters[l], scheme.get(l, 0.0)) for l in self.layers}

    def flops_kept(self, kept: dict[str, int]) -> int:
        total = 0
        for l in self.layers:
            k_in = sum(kept.get(s, self.filters[s]) if isinstance(s, str) else s for s in self.sources[l])
            total += self.coef[l] * kept.get(l, self.filters[l]) * k_in
        return total

    def flops(self, scheme) -> int:
        return self.flops_kept(self.kept(scheme))

    def ratio(self, scheme) -> float:
        return self.flops(scheme) / self.total


# ---------------------------------------------------------------------------
# sensitivity analysis


@dataclass
class SensitivityCurve:
    metric: str
    baseline: float
    ratios: list[float]
    curves: dict[str, list[float]]  # layer -> metric at each ratio (index 0 == baseline)

    def drops(self, layer) -> np.ndarray:
        """Metric loss in points (x100) relative to the baseline."""
        return 100.0 * (self.baseline - np.asarray(self.curves[layer]))

    def to_text(self) -> str:
        head = "layer " + " ".join(f"{r:.1f}" for r in self.ratios)
        lines = [f"# metric {self.metric} baseline {self.baseline!r}", head]
        for layer, vals in self.curves.items():
            lines.append(layer + " " + " ".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, where="<text>") -> "SensitivityCurve":
        lines = [l for l in text.splitlines() if l.strip()]
        try:
            _, _, metric, _, baseline = lines[0].split()
            ratios = [float(v) for v in lines[1].split()[1:]]
            curves = {}
            for line in lines[2:]:
                parts = line.split()
                vals = [float(v) for v in parts[1:]]
                if len(vals) != len(ratios):
                    raise ValueError(f"layer {parts[0]} has {len(vals)} values, expected {len(ratios)}")
                curves[parts[0]] = vals
        except (IndexError, ValueError) as exc:
            raise FormatError(f"malformed sensitivity file: {exc}", where) from None
        return cls(metric, float(baseline), ratios, curves)


def metric_fn(metric: str = "wiou", batch: int = 16):
    """Build ``f(graph, x, y) -> float`` for 'wiou', 'giou' or 'iou:<class>'."""
    def f(g, x, y):
        cm = metrics.accumulate(predict_batches(g, x, batch), y, g.classes)
        if metric == "wiou":
            return metrics.aggregate(cm).wiou
        if metric == "giou":
            return metrics.aggregate(cm).giou
        if metric.startswith("iou:"):
            v = metrics.iou(cm).iou[int(metric[4:])]
            return float(0.0 if np.isnan(v) else v)
        raise ValueError(f"unknown metric {metric!r}")
    return f


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HSICOMP_THREADS", "1")))
    except ValueError:
        return 1


def sensitivity_analysis(g: NetGraph, eval_set, metric: str = "wiou", ratios=RATIOS,
                         layers=None, workers: int | None = None) -> SensitivityCurve:
    x, y = eval_set
    if len(x) == 0:
        raise ValueError("evaluation set is empty")
    f = metric_fn(metric)
    baseline = f(g, x, y)
    layers = list(layers or g.prunable())
    jobs = [(l, r) for l in layers for r in ratios if r > 0]

    def one(job):
        layer, r = job
        pruned, _ = apply_scheme(g, {layer: r})
        return f(pruned, x, y)

    n = workers or _workers()
    if n > 1:
        with ThreadPoolExecutor(n) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    lookup = dict(zip(jobs, results))
    curves = {l: [baseline if r == 0 else lookup[(l, r)] for r in ratios] for l in layers}
    return SensitivityCurve(metric, baseline, list(ratios), curves)


def synthetic_curves(model: FlopsModel, slopes: dict[str, float], metric="wiou", baseline=0.9) -> SensitivityCurve:
    """Linear curves: metric drop (points) = slope * ratio."""
    curves = {l: [baseline - slopes[l] * r / 100.0 for r in RATIOS] for l in model.prunable}
    return SensitivityCurve(metric, baseline, list(RATIOS), curves)


def param_scaled_slopes(model: FlopsModel, scale: float = 2.0, power: float = 0.5,
                        jitter: float = 0.1, seed: int = 0) -> dict[str, float]:
    """Slopes shrinking with layer size: parameter-heavy layers are the robust ones.

    A small multiplicative jitter keeps equally sized layers apart, as measured
    curves would be.
    """
    params = {l: model.report.by_id()[l].params for l in model.prunable}
    ref = np.median(list(params.values()))
    noise = np.random.default_rng(seed).uniform(1 - jitter, 1 + jitter, len(params))
    return {l: scale * (ref / params[l]) ** power * k for l, k in zip(model.prunable, noise)}


# ---------------------------------------------------------------------------
# scheme search


@dataclass
class SearchResult:
    scheme: PruningScheme
    achieved: float  # remaining FLOPS fraction
    target: float
    budget: float  # largest per-layer drop (points) admitted
    excluded: list[str]

    @property
    def locked(self) -> list[str]:
        return self.scheme.locked()


def search_scheme(curves: SensitivityCurve, model: FlopsModel, overall_pr: float,
                  exclusion_threshold: float = 5.0, max_ratio: float = MAX_RATIO) -> SearchResult:
    """Smallest degradation budget whose layer-wise ratios reach ``(1 - overall_pr)`` of the FLOPS.

    Under a budget ``t`` every layer takes the largest ratio whose metric drop
    is at most ``t``. Only the observed drop values can change the scheme, so
    the bisection runs over their sorted set; layers with identical curves
    therefore always get identical ratios. Layers losing more than
    ``exclusion_threshold`` points already at the first ratio step stay unpruned.
    """
    if not 0 <= overall_pr < 1:
        raise SchemeError(f"overall pruning ratio must lie in [0, 1), got {overall_pr}")
    target = (1.0 - overall_pr) * model.total
    layers = [l for l in model.prunable if l in curves.curves]
    missing = set(model.prunable) - set(layers)
    if missing:
        raise SchemeError(f"no sensitivity curve for {sorted(missing)}")
    ratios = curves.ratios
    allowed = [i for i, r in enumerate(ratios) if 0 < r <= max_ratio + 1e-9]
    first = next(i for i, r in enumerate(ratios) if r > 0)
    excluded, drops = [], {}
    for l in layers:
        d = curves.drops(l)
        if d[first] > exclusion_threshold:
            excluded.append(l)
        else:
            drops[l] = d
    budgets = np.unique([drops[l][i] for l in drops for i in allowed])

    def scheme_at(t):
        s = PruningScheme({l: 0.0 for l in layers})
        for l, d in drops.items():
            ok = [ratios[i] for i in allowed if d[i] <= t]
            if ok:
                s[l] = max(ok)
        return s

    if model.flops(scheme_at(0.0)) <= target:
        s = scheme_at(0.0)
        return SearchResult(s, model.ratio(s), 1.0 - overall_pr, 0.0, excluded)
    if not len(budgets) or model.flops(scheme_at(budgets[-1])) > target:
        full = scheme_at(budgets[-1]) if len(budgets) else scheme_at(0.0)
        best = 1.0 - model.ratio(full)
        raise InfeasibleError(
            f"overall pr {overall_pr} unreachable; at most {best:.3f} with the current exclusions",
            max_achievable=best,
        )
    lo, hi = -1, len(budgets) - 1  # invariant: budgets[hi] meets the target, budgets[lo] does not
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if model.flops(scheme_at(budgets[mid])) <= target:
            hi = mid
        else:
            lo = mid
    budget = float(budgets[hi])
    s = scheme_at(budget)
    return SearchResult(s, model.ratio(s), 1.0 - overall_pr, budget, excluded)


# ---------------------------------------------------------------------------
# iterative pruning


@dataclass
class IterationConfig:
    overall_pr: float = 0.5
    layer_drop: float = 0.25  # max per-layer wIoU loss (points) at the chosen ratios
    locked_fraction: float = 0.25
    model_drop: float = 1.0  # max model wIoU loss (points) after finetuning
    exclusion_threshold: float = 5.0
    pr_step: float = 0.05  # overall pr reduction on a failed gate
    max_retries: int = 4
    finetune_epochs: int = 60
    finetune_lr: float = 1e-6
    finetune_batch: int = 8
    seed: int = 0
    metric: str = "wiou"

    def __post_init__(self):
        for name in ("layer_drop", "locked_fraction", "model_drop"):
            if getattr(self, name) <= 0:
                raise SchemeError(f"{name} must be positive")

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(lr=self.finetune_lr, epochs=self.finetune_epochs, batch=self.finetune_batch,
                           seed=self.seed, patience=self.finetune_epochs)


@dataclass
class IterationReport:
    requested_pr: float
    used_pr: float
    scheme: dict
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    locked: int
    prunable: int
    budget: float
    wiou_before: float
    wiou_pruned: float
    wiou_finetuned: float
    attempts: list = field(default_factory=list)

    @property
    def flops_ratio(self) -> float:
        return self.flops_after / self.flops_before

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flops_ratio"] = self.flops_ratio
        return d

    def table(self) -> str:
        rows = [
            ("overall pr (requested / used)", f"{self.requested_pr:.2f} / {self.used_pr:.2f}"),
            ("GFLOPS before -> after", f"{self.flops_before / 1e9:.4f} -> {self.flops_after / 1e9:.4f}"),
            ("FLOPS ratio", f"{self.flops_ratio:.4f}"),
            ("Mparams before -> after", f"{self.params_before / 1e6:.4f} -> {self.params_after / 1e6:.4f}"),
            ("locked layers", f"{self.locked}/{self.prunable}"),
            ("wIoU base / pruned / finetuned",
             f"{100 * self.wiou_before:.2f} / {100 * self.wiou_pruned:.2f} / {100 * self.wiou_finetuned:.2f}"),
        ]
        lines = [f"{k:<32}{v}" for k, v in rows]
        lines.append("scheme: " + " ".join(f"{k}={v:.1f}" for k, v in self.scheme.items()))
        return "\n".join(lines)


def check_gates(result: SearchResult, curves: SensitivityCurve, cfg: IterationConfig) -> list[str]:
    """Pre-finetune gate failures (empty list = pass)."""
    failures = []
    ratios = curves.ratios
    worst = 0.0
    for l, r in result.scheme.items():
        if r > 0:
            worst = max(worst, float(curves.drops(l)[ratios.index(r)]))
    if worst >= cfg.layer_drop:
        failures.append(f"layer drop {worst:.3f} >= {cfg.layer_drop} points")
    frac = len(result.locked) / max(len(result.scheme), 1)
    if frac >= cfg.locked_fraction:
        failures.append(f"locked fraction {frac:.2f} >= {cfg.locked_fraction}")
    return failures


def run_iteration(g: NetGraph, train_set, val_set, cfg: IterationConfig = IterationConfig(),
                  curves: SensitivityCurve | None = None, final: bool = False):
    """One pass of analyse -> search -> gate -> prune -> finetune.

    Intermediate iterations must pass the per-layer and locked-layer gates as
    well as the post-finetune model drop; the ``final`` one only the latter.
    On a failure the overall ratio is lowered by ``cfg.pr_step`` and the search
    repeats (sensitivity curves are reused within the iteration).
    """
    model = FlopsModel(g)
    f = metric_fn(cfg.metric)
    base = f(g, *val_set)
    if curves is None:
        curves = sensitivity_analysis(g, val_set, cfg.metric)
    pr = cfg.overall_pr
    attempts = []
    for _ in range(cfg.max_retries + 1):
        if pr <= 0:
            break
        try:
            res = search_scheme(curves, model, pr, cfg.exclusion_threshold)
        except InfeasibleError as exc:
            attempts.append({"pr": pr, "failure": str(exc)})
            pr = round(min(pr - cfg.pr_step, exc.max_achievable or 0.0), 4)
            continue
        failures = [] if final else check_gates(res, curves, cfg)
        if failures:
            attempts.append({"pr": pr, "failure": "; ".join(failures)})
            pr = round(pr - cfg.pr_step, 4)
            continue
        pruned, _ = apply_scheme(g, res.scheme)
        pruned_metric = f(pruned, *val_set)
        tuned = train(pruned, train_set, val_set, cfg.finetune_config()).graph
        tuned_metric = f(tuned, *val_set)
        drop = 100.0 * (base - tuned_metric)
        if drop >= cfg.model_drop:
            attempts.append({"pr": pr, "failure": f"model drop {drop:.3f} >= {cfg.model_drop} points"})
            pr = round(pr - cfg.pr_step, 4)
            continue
        before, after = analyze(g), analyze(tuned)
        attempts.append({"pr": pr, "failure": None})
        report = IterationReport(
            requested_pr=cfg.overall_pr, used_pr=pr, scheme=dict(res.scheme),
            flops_before=before.flops, flops_after=after.flops,
            params_before=before.params, params_after=after.params,
            locked=len(res.locked), prunable=len(res.scheme), budget=res.budget,
            wiou_before=base, wiou_pruned=pruned_metric, wiou_finetuned=tuned_metric,
            attempts=attempts,
        )
        log.info("iteration done: pr %.2f flops ratio %.3f", pr, report.flops_ratio)
        return tuned, report
    raise IterationError(f"no acceptable scheme for overall pr {cfg.overall_pr}", attempts)


@dataclass
class InitPruneReport:
    seed: int
    overall_pr: float
    scheme: dict
    flops_ratio: float
    params_before: int
    params_after: int
    wiou: float
    history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def prune_at_init(g: NetGraph, train_set, val_set, overall_pr: float,
                  train_cfg: TrainConfig = TrainConfig(), exclusion_threshold: float = 100.0,
                  metric: str = "wiou"):
    """Search a scheme on the untrained network, prune, then train from scratch."""
    model = FlopsModel(g)
    if overall_pr > 0:
        curves = sensitivity_analysis(g, val_set, metric)
        scheme = search_scheme(curves, model, overall_pr, exclusion_threshold).scheme
    else:
        scheme = PruningScheme({l: 0.0 for l in model.prunable})
    pruned, _ = apply_scheme(g, scheme)
    result = train(pruned, train_set, val_set, train_cfg)
    before, after = analyze(g), analyze(result.graph)
    report = InitPruneReport(
        seed=train_cfg.seed, overall_pr=overall_pr, scheme=dict(scheme),
        flops_ratio=after.flops / before.flops, params_before=before.params, params_after=after.params,
        wiou=score(result.graph, *val_set).wiou, history=result.history,
    )
    return result.graph, report


def save_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, default=float))
