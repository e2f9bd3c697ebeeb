"""End-to-end desk run: synthetic data, baseline training, two pruning
iterations, INT8 deployment and a staged pipeline profile.

Writes summary.json (and the models) into --out. Takes roughly seven minutes on one core.
"""

import argparse
import json
import logging
from pathlib import Path

from hsicomp.benchmark import DeskConfig, quantize_for_deployment, run_desk
from hsicomp.complexity import analyze
from hsicomp.data import desk_spec, generate, make_calibration
from hsicomp.netgraph import save
from hsicomp.pipeline import StagePlan, model_runner, run_pipeline, standard_steps
from hsicomp.quantization import save_params


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("desk_out"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=2)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.out.mkdir(parents=True, exist_ok=True)

    res = run_desk(DeskConfig(seed=args.seed, iterations=args.iterations))
    print(f"baseline   {analyze(res.baseline).flops / 1e6:8.1f} MFLOPS  test wIoU {res.base_test_wiou:.4f}")
    print(f"pruned     {analyze(res.pruned).flops / 1e6:8.1f} MFLOPS  test wIoU {res.pruned_test_wiou:.4f}"
          f"  (ratio {res.flops_ratio:.3f})")

    q = quantize_for_deployment(res.pruned, res.prepared)
    print(f"INT8       argmax agreement {q.agreement:.4f}  fused drift {q.drift.fraction:.5f}")

    spec = desk_spec()
    calib = make_calibration(spec)
    steps = standard_steps(calib, spec.preprocess_config(), res.prepared.stats,
                           model_runner(q.fused, None, q.params_fused))
    frames = [s.raw for s in generate(spec, args.seed + 1, 24, calib)]
    _, prof = run_pipeline(frames, steps, StagePlan.standard(3), warmup=4)
    print(f"pipeline   {prof.throughput:.1f} frames/s with 3 stages")

    save(res.baseline, args.out / "baseline")
    save(res.pruned, args.out / "pruned")
    save(q.fused, args.out / "fused")
    save_params(args.out / "params_fused.json", q.params_fused)
    summary = res.summary() | {"int8_agreement": q.agreement, "int8_drift": q.drift.to_dict(),
                               "pipeline_fps": prof.throughput}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
