"""Glue shared by the CLI and the experiment scripts: prepared datasets and splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, fold_rounds, label_from_bytes, label_to_bytes, stratified_folds
from .errors import FormatError
from .netgraph.graph import NormalizationParams
from .preprocess import ChannelStats, clip_channels, compute_clip_thresholds, run_preprocess
from .tensor import Layout, Tensor, read_cube, write_cube


@dataclass
class Prepared:
    """Preprocessed cubes (clipped, PN) with labels, channel stats and folds."""

    cubes: np.ndarray  # (N, H, W, B) float32
    labels: np.ndarray  # (N, H, W) uint8
    stats: ChannelStats
    folds: list[list[int]]
    classes: int

    def __len__(self):
        return len(self.cubes)

    @property
    def norm(self) -> NormalizationParams:
        return NormalizationParams(self.stats.min, self.stats.max)

    def normalized(self, idx=None) -> np.ndarray:
        x = self.cubes if idx is None else self.cubes[idx]
        n = self.norm
        return (x * n.weight.astype(np.float32) + n.bias.astype(np.float32)).astype(np.float32)

    def split(self, rnd: int = 0, normalized: bool = True):
        """(train, val, test) pairs of (x, y) for fold-rotation round ``rnd``."""
        out = []
        for idx in fold_rounds(self.folds)[rnd]:
            idx = np.asarray(idx)
            x = self.normalized(idx) if normalized else self.cubes[idx]
            out.append((x, self.labels[idx]))
        return tuple(out)


def prepare(ds: Dataset, folds: int = 5, coverage: float = 0.9995) -> Prepared:
    """Run the preprocessing chain; clip thresholds come from the training folds of round 0."""
    cfg = ds.spec.preprocess_config()
    cubes = [run_preprocess(s.raw, ds.calib, None, cfg) for s in ds.samples]
    labels = np.stack([s.gt for s in ds.samples]).astype(np.uint8)
    f = stratified_folds(list(labels), folds, ds.spec.classes)
    train_idx = fold_rounds(f)[0][0]
    stats = compute_clip_thresholds([cubes[i] for i in train_idx], coverage)
    clipped = np.stack([clip_channels(c, stats).array() for c in cubes]).astype(np.float32)
    return Prepared(clipped, labels, stats, f, ds.spec.classes)


def save_prepared(p: Prepared, directory) -> None:
    d = Path(directory)
    (d / "cubes").mkdir(parents=True, exist_ok=True)
    (d / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(len(p)):
        write_cube(d / "cubes" / f"{i:04d}.hscb", Tensor.from_array(p.cubes[i], Layout.BIP))
        (d / "labels" / f"{i:04d}.hslb").write_bytes(label_to_bytes(p.labels[i]))
    p.stats.save(d / "stats.json")
    meta = {"format": "hsicomp-prepared", "count": len(p), "classes": p.classes, "folds": p.folds}
    (d / "prepared.json").write_text(json.dumps(meta, indent=1))


def load_prepared(directory) -> Prepared:
    d = Path(directory)
    mpath = d / "prepared.json"
    try:
        meta = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError("not a prepared dataset (missing prepared.json)", str(mpath)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno}", str(mpath)) from None
    cubes, labels = [], []
    for i in range(int(meta["count"])):
        cpath, lpath = d / "cubes" / f"{i:04d}.hscb", d / "labels" / f"{i:04d}.hslb"
        if not cpath.exists() or not lpath.exists():
            raise FormatError(f"sample {i:04d} incomplete", str(d))
        cubes.append(read_cube(cpath).array())
        labels.append(label_from_bytes(lpath.read_bytes(), str(lpath)))
    return Prepared(np.stack(cubes).astype(np.float32), np.stack(labels), ChannelStats.load(d / "stats.json"),
                    [list(map(int, f)) for f in meta["folds"]], int(meta["classes"]))
