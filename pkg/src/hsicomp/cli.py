"""``hsicomp`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .benchmark import quantize_for_deployment
from .complexity import analyze
from .config import RunConfig
from .data import CLASS_NAMES, generate, make_calibration, read_dataset, write_dataset
from .errors import HsiError
from .netgraph import build_unet, load, save
from .netgraph.train import predict_batches, train
from .pipeline import StagePlan, model_runner, profile_report, run_pipeline, standard_steps
from .pruning import (
    IterationConfig,
    prune_at_init,
    run_iteration,
    sensitivity_analysis,
)
from .quantization import load_params, quantized_predict, save_params
from .workflow import load_prepared, prepare, save_prepared

log = logging.getLogger("hsicomp")


# ---------------------------------------------------------------------------
# argument types


def _unit_ratio(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"overall pruning ratio must lie in [0, 1), got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _shape(text: str) -> tuple[int, int, int]:
    try:
        h, w, b = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxWxB, got {text!r}") from None
    if min(h, w, b) <= 0:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w, b


def _stages(text: str) -> int:
    if text not in ("1", "2", "3"):
        raise argparse.ArgumentTypeError("stages must be 1, 2 or 3")
    return int(text)


# ---------------------------------------------------------------------------
# helpers


def _out(args, name: str) -> Path:
    d = Path(args.workdir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _pick(value, default):
    return default if value is None else value


def _emit(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=float) + "\n")


def _splits(cfg: RunConfig, prepared_dir):
    p = load_prepared(prepared_dir)
    return p, p.split(cfg.prep.round)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> None:
    spec = cfg.scene
    calib = make_calibration(spec)
    samples = generate(spec, args.seed, args.count, calib)
    out = Path(_pick(args.out, Path(args.workdir) / "data"))
    write_dataset(out, samples, calib, spec)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_preprocess(args, cfg: RunConfig) -> None:
    ds = read_dataset(_pick(args.dataset, cfg.paths.dataset))
    p = prepare(ds, cfg.prep.folds, cfg.prep.coverage)
    out = Path(_pick(args.out, Path(args.workdir) / "prepared"))
    save_prepared(p, out)
    print(f"prepared {len(p)} cubes {p.cubes.shape[1:]} -> {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    p, (tr, va, te) = _splits(cfg, _pick(args.prepared, cfg.paths.prepared))
    h, w = p.cubes.shape[1:3]
    m = cfg.model
    g = build_unet(m.depth, m.init_filters, p.cubes.shape[3], p.classes, m.dropout, seed=args.seed, input_hw=(h, w))
    tcfg = cfg.train
    tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    result = train(g, tr, va, tcfg)
    out = Path(_pick(args.out, Path(args.workdir) / "model"))
    save(result.graph, out)
    _emit(out / "history.json", {"best_epoch": result.best_epoch, "history": result.history})
    print(f"best epoch {result.best_epoch}; model saved to {out}")


def cmd_analyze(args, cfg: RunConfig) -> None:
    g = load(args.model)
    rep = analyze(g, args.input)
    print(rep.table())
    out = _out(args, "analyze")
    (out / "layers.csv").write_text(rep.records_text() + "\n")
    _emit(out / "summary.json", {"flops": rep.flops, "params": rep.params, "size_bytes": rep.size_bytes()})


def cmd_sensitivity(args, cfg: RunConfig) -> None:
    g = load(_pick(args.model, cfg.paths.model))
    _, (_, va, _) = _splits(cfg, _pick(args.prepared, cfg.paths.prepared))
    curves = sensitivity_analysis(g, va, args.metric)
    out = _out(args, "sensitivity")
    (out / f"curves_{args.metric.replace(':', '')}.txt").write_text(curves.to_text())
    print(curves.to_text(), end="")


def cmd_prune(args, cfg: RunConfig) -> None:
    g = load(_pick(args.model, cfg.paths.model))
    _, (tr, va, te) = _splits(cfg, _pick(args.prepared, cfg.paths.prepared))
    icfg: IterationConfig = cfg.pruning
    icfg.seed = args.seed
    if args.overall_pr is not None:
        icfg.overall_pr = args.overall_pr
    if args.finetune_epochs is not None:
        icfg.finetune_epochs = args.finetune_epochs
    out = _out(args, "prune")
    base_flops = analyze(g).flops
    for it in range(1, args.iterations + 1):
        g, report = run_iteration(g, tr, va, icfg, final=it == args.iterations)
        d = out / f"iter{it}"
        save(g, d / "model")
        _emit(d / "report.json", report.to_dict())
        (d / "scheme.txt").write_text("\n".join(f"{k} {v:.1f}" for k, v in report.scheme.items()) + "\n")
        print(f"iteration {it}\n{report.table()}\ncumulative FLOPS ratio {report.flops_after / base_flops:.4f}\n")


def cmd_prune_at_init(args, cfg: RunConfig) -> None:
    p, (tr, va, te) = _splits(cfg, _pick(args.prepared, cfg.paths.prepared))
    h, w = p.cubes.shape[1:3]
    m = cfg.model
    out = _out(args, "prune_at_init")
    rows = []
    for k in range(args.seeds):
        seed = args.seed + k
        g = build_unet(m.depth, m.init_filters, p.cubes.shape[3], p.classes, m.dropout, seed=seed, input_hw=(h, w))
        tcfg = cfg.train
        tcfg.seed = seed
        pruned, rep = prune_at_init(g, tr, va, args.overall_pr, tcfg)
        save(pruned, out / f"seed{seed}" / "model")
        _emit(out / f"seed{seed}" / "report.json", rep.to_dict())
        rows.append(rep)
    layers = list(rows[0].scheme)
    lines = ["layer," + ",".join(f"seed{r.seed}" for r in rows)]
    lines += [l + "," + ",".join(f"{r.scheme[l]:.1f}" for r in rows) for l in layers]
    (out / "schemes.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    for r in rows:
        print(f"seed {r.seed}: FLOPS ratio {r.flops_ratio:.3f}, params -{100 * (1 - r.params_after / r.params_before):.1f}%, "
              f"wIoU {100 * r.wiou:.2f}")


def cmd_quantize(args, cfg: RunConfig) -> None:
    g = load(_pick(args.model, cfg.paths.model))
    p = load_prepared(_pick(args.calib, _pick(cfg.paths.calib, cfg.paths.prepared)))
    q = quantize_for_deployment(g, p, cfg.prep.round, cfg.quant.calib_images, cfg.quant.cle, cfg.quant.window)
    out = _out(args, "quant")
    save(q.explicit, out / "model")
    save(q.fused, out / "model_fused")
    save_params(out / "params.json", q.params)
    save_params(out / "params_fused.json", q.params_fused)
    _emit(out / "drift.json", {**q.drift.to_dict(), "float_fraction": q.float_drift.fraction,
                               "int8_float_agreement": q.agreement})
    fin = q.params_fused["input"]
    print(f"calibrated {len(q.params)} tensors; input exponent {q.params['input'].exponent} "
          f"(fused {fin.exponent}, zero point {fin.zero_point})")
    print(f"INT8 vs float argmax agreement {100 * q.agreement:.2f}%")
    print(f"fused-vs-explicit argmax drift {100 * q.drift.fraction:.2f}% "
          f"({100 * q.drift.boundary_share:.1f}% of changed pixels near class boundaries)")


def cmd_eval(args, cfg: RunConfig) -> None:
    g = load(_pick(args.model, cfg.paths.model))
    _, splits = _splits(cfg, _pick(args.prepared, cfg.paths.prepared))
    x, y = splits[{"train": 0, "val": 1, "test": 2}[args.split]]
    if args.quant:
        params = load_params(args.quant)
        pred = np.concatenate([quantized_predict(g, params, x[i:i + 8]) for i in range(0, len(x), 8)])
    else:
        pred = predict_batches(g, x)
    cm = metrics.accumulate(pred, y, g.classes)
    agg = metrics.aggregate(cm)
    names = CLASS_NAMES if g.classes == len(CLASS_NAMES) else None
    print(metrics.report(cm, names))
    out = _out(args, "eval")
    scores = metrics.iou(cm)
    _emit(out / f"metrics_{args.split}{'_int8' if args.quant else ''}.json",
          {"giou": agg.giou, "wiou": agg.wiou, "iou": [None if np.isnan(v) else float(v) for v in scores.iou]})


def cmd_bench(args, cfg: RunConfig) -> None:
    g = load(_pick(args.model, cfg.paths.model))
    ds = read_dataset(_pick(args.frames, cfg.paths.dataset))
    pcfg = ds.spec.preprocess_config()
    stats = load_prepared(_pick(args.prepared, cfg.paths.prepared)).stats
    params = load_params(args.quant) if args.quant else None
    steps = standard_steps(ds.calib, pcfg, stats, model_runner(g, stats, params))
    frames = [s.raw for s in ds.samples]
    plan = StagePlan.standard(_pick(args.stages, cfg.bench.stages))
    _, prof = run_pipeline(frames, steps, plan, _pick(args.repeat, cfg.bench.repeat), cfg.bench.warmup)
    print(profile_report(prof))
    _emit(_out(args, "bench") / f"profile_{plan.stage_count}stage.json", prof.to_dict())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def common_flags(defaults: bool) -> argparse.ArgumentParser:
        # subcommands repeat the flags without defaults so they never mask ones given earlier
        c = argparse.ArgumentParser(add_help=False)
        kw = {} if defaults else {"default": argparse.SUPPRESS}
        c.add_argument("--seed", type=int, help="seed for every random choice (default 0)",
                       **(kw or {"default": 0}))
        c.add_argument("--config", help="JSON run configuration", **kw)
        c.add_argument("--workdir", help="output directory (default: paths.workdir of the config)", **kw)
        c.add_argument("-v", "--verbose", action="store_true", **kw)
        return c

    common = common_flags(False)
    ap = argparse.ArgumentParser(prog="hsicomp", parents=[common_flags(True)],
                                 description="Hyperspectral U-Net preprocessing, compression and benchmarking.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic mosaic dataset")
    p.add_argument("--count", type=_positive_int, default=200)
    p.add_argument("--out")

    p = add("preprocess", cmd_preprocess, "run the preprocessing chain over a dataset")
    p.add_argument("--dataset")
    p.add_argument("--out")

    p = add("train", cmd_train, "train a U-Net on a prepared dataset")
    p.add_argument("--prepared")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")

    p = add("analyze", cmd_analyze, "per-layer FLOPS / parameter table")
    p.add_argument("model")
    p.add_argument("--input", type=_shape, help="HxWxB (default: the model's own input shape)")

    p = add("sensitivity", cmd_sensitivity, "per-layer pruning sensitivity curves")
    p.add_argument("--model")
    p.add_argument("--prepared")
    p.add_argument("--metric", default="wiou", help="wiou, giou or iou:<class>")

    p = add("prune", cmd_prune, "iterative structured pruning with finetuning")
    p.add_argument("--model")
    p.add_argument("--prepared")
    p.add_argument("--overall-pr", type=_unit_ratio)
    p.add_argument("--iterations", type=_positive_int, default=1)
    p.add_argument("--finetune-epochs", type=int)

    p = add("prune-at-init", cmd_prune_at_init, "prune an untrained network, then train it")
    p.add_argument("--prepared")
    p.add_argument("--overall-pr", type=_unit_ratio, default=0.6)
    p.add_argument("--seeds", type=_positive_int, default=3)

    p = add("quantize", cmd_quantize, "BN folding, equalization and INT8 calibration")
    p.add_argument("--model")
    p.add_argument("--calib", help="prepared directory used for calibration")

    p = add("eval", cmd_eval, "segmentation metrics of a model (optionally INT8)")
    p.add_argument("--model")
    p.add_argument("--prepared")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--quant", help="quantization parameter file")

    p = add("bench", cmd_bench, "profile the staged preprocessing + inference pipeline")
    p.add_argument("--model")
    p.add_argument("--frames", help="dataset directory providing raw frames and calibration")
    p.add_argument("--prepared", help="prepared directory providing channel stats")
    p.add_argument("--stages", type=_stages)
    p.add_argument("--repeat", type=_positive_int)
    p.add_argument("--quant", help="quantization parameter file")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        args.workdir = args.workdir or cfg.paths.workdir
        args.fn(args, cfg)
    except HsiError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
