"""Per-layer FLOPS and parameter table of the reference U-Net, plus a few pruned variants."""

import argparse

from hsicomp.complexity import analyze
from hsicomp.netgraph import build_unet
from hsicomp.pruning import FlopsModel, apply_scheme


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", default="192x384x25", help="HxWxB input shape")
    ap.add_argument("--classes", type=int, default=5)
    args = ap.parse_args()
    shape = tuple(int(v) for v in args.input.split("x"))
    g = build_unet(5, 32, shape[2], args.classes)
    rep = analyze(g, shape)
    print(rep.table())
    model = FlopsModel(g, shape)
    print("\nuniform pruning ratio -> FLOPS ratio")
    for r in (0.2, 0.4, 0.5, 0.6, 0.8):
        scheme = {l: r for l in g.prunable()}
        pruned, _ = apply_scheme(g, scheme)
        assert analyze(pruned, shape).flops == model.flops(scheme)
        print(f"  {r:.1f} -> {model.flops(scheme) / rep.flops:.3f}")


if __name__ == "__main__":
    main()
