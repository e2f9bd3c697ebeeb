"""Synthetic snapshot-mosaic scenes, dataset directories and stratified folds.

A scene is a continuous reflectance field: axis-aligned rectangles of
per-class spectral signatures over a background class, multiplied by a
per-sample illumination (scalar times a gentle linear ramp). Each mosaic
pixel samples that field at its band's physical sub-pixel position, so band
misalignment arises the way it does on the sensor and bilinear alignment
recovers it exactly wherever the field is locally linear.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .preprocess import (
    CalibrationPair,
    MosaicGeometry,
    PreprocessConfig,
    RawFrame,
    crop_offsets,
    read_calibration,
    read_raw,
    write_calibration,
    write_raw,
)
from .tensor import Layout, Tensor, pack_cube, read_cube, unpack_cube, write_cube

CLASS_NAMES = ("Road", "Marks", "Vegetation", "Sky", "Other")


@dataclass
class SceneSpec:
    classes: int = 5
    tile: int = 5
    cube_height: int = 216
    cube_width: int = 409
    frame_height: int = 1088
    frame_width: int = 2048
    active_top: int = 0
    active_left: int = 0
    bit_depth: int = 10
    depth: int = 5
    reference: tuple[int, int] = (2, 2)
    misaligned: bool = True
    signatures: list | None = None  # classes x bands reflectances; generated when None
    signature_seed: int = 7
    signature_margin: float = 0.3  # min pairwise L2 between mean-one spectral shapes
    rects: tuple[int, int] = (3, 8)
    rect_size: tuple[float, float] = (0.15, 0.5)  # fraction of the cube side
    illumination: tuple[float, float] = (0.5, 1.5)
    illum_gradient: float = 0.2
    noise_sigma: float = 0.01
    dark_level: float = 60.0
    dark_variation: float = 8.0
    gain_level: float = 800.0
    gain_variation: float = 0.1
    calib_seed: int = 11

    @property
    def bands(self) -> int:
        return self.tile * self.tile

    @property
    def geometry(self) -> MosaicGeometry:
        return MosaicGeometry(self.tile, tuple(self.reference), self.misaligned)

    def preprocess_config(self, **overrides) -> PreprocessConfig:
        cfg = PreprocessConfig(
            cube_height=self.cube_height, cube_width=self.cube_width,
            crop_top=self.active_top, crop_left=self.active_left, bit_depth=self.bit_depth,
            reference=tuple(self.reference), misaligned=self.misaligned, depth=self.depth, tile=self.tile,
        )
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def output_hw(self) -> tuple[int, int]:
        top, left, h, w = crop_offsets(self.cube_height, self.cube_width, self.depth)
        return h, w

    def validate(self) -> None:
        ah, aw = self.cube_height * self.tile, self.cube_width * self.tile
        if self.active_top + ah > self.frame_height or self.active_left + aw > self.frame_width:
            raise ConfigError("active mosaic window does not fit in the frame")
        if self.classes < 1:
            raise ConfigError("need at least one class")
        lo, hi = self.illumination
        if not 0 < lo <= hi:
            raise ConfigError(f"bad illumination range {self.illumination}")
        if self.gain_level <= 0 or self.gain_level * (1 - self.gain_variation) <= 0:
            raise ConfigError("flat gain must stay positive")
        if self.dark_level + self.dark_variation + self.gain_level * (1 + self.gain_variation) >= 2 ** self.bit_depth:
            raise ConfigError("dark + gain exceeds the sensor range")
        sig = np.asarray(self.signatures if self.signatures is not None else signatures(self))
        if sig.shape != (self.classes, self.bands):
            raise ConfigError(f"signatures must be {self.classes}x{self.bands}, got {sig.shape}")
        if sig.min() < 0 or sig.max() > 1:
            raise ConfigError("signatures must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reference"] = list(self.reference)
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("reference", "rects", "rect_size", "illumination"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def desk_spec(**overrides) -> SceneSpec:
    """Small scenes (32x64 network input) for CPU-scale experiments with a depth-3 U-Net."""
    base = dict(cube_height=36, cube_width=70, frame_height=184, frame_width=352, depth=3,
                rects=(2, 5), rect_size=(0.2, 0.6))
    base.update(overrides)
    return SceneSpec(**base)


def signatures(spec: SceneSpec) -> np.ndarray:
    """Smooth random spectra with pairwise-distinct shapes (illumination-invariant)."""
    if spec.signatures is not None:
        return np.asarray(spec.signatures, dtype=np.float64)
    rng = np.random.default_rng(spec.signature_seed)
    bands = np.arange(spec.bands)
    out = []
    for _ in range(10_000):
        base = rng.uniform(0.1, 0.35)
        s = np.full(spec.bands, base)
        for _ in range(2):
            centre = rng.uniform(0, spec.bands - 1)
            width = rng.uniform(2.0, 6.0)
            s += rng.uniform(-0.12, 0.2) * np.exp(-0.5 * ((bands - centre) / width) ** 2)
        s = np.clip(s, 0.02, 0.6)
        shape = s / s.mean()
        if all(np.linalg.norm(shape - o / o.mean()) >= spec.signature_margin for o in out):
            out.append(s)
            if len(out) == spec.classes:
                return np.array(out)
    raise ConfigError("could not draw signatures satisfying the margin")


def make_calibration(spec: SceneSpec) -> CalibrationPair:
    """Smooth dark offset (integer counts) and flat gain fields over the whole frame."""
    rng = np.random.default_rng(spec.calib_seed)
    h, w = spec.frame_height, spec.frame_width
    y = np.linspace(0, 1, h)[:, None]
    x = np.linspace(0, 1, w)[None, :]

    def smooth():
        p = rng.uniform(0, 2 * np.pi, 2)
        return np.cos(np.pi * y + p[0]) * np.cos(np.pi * x + p[1])

    dark = np.round(spec.dark_level + spec.dark_variation * smooth())
    gain = spec.gain_level * (1 + spec.gain_variation * smooth())
    return CalibrationPair(dark.astype(np.float32), (dark + gain).astype(np.float32))


@dataclass
class LabeledSample:
    raw: RawFrame
    gt: np.ndarray  # (H, W) uint8 in post-crop coordinates
    truth_cube: Tensor | None  # noiseless aligned reflectance, BIP, post-crop
    illumination: float = 1.0


def _label_field(rects, background, ys, xs):
    lab = np.full(np.broadcast(ys, xs).shape, background, dtype=np.uint8)
    for y0, y1, x0, x1, cls in rects:
        inside = (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
        lab[inside] = cls
    return lab


def _scene(spec: SceneSpec, rng):
    h, w = spec.cube_height, spec.cube_width
    n = int(rng.integers(spec.rects[0], spec.rects[1] + 1))
    rects = []
    for _ in range(n):
        rh = rng.uniform(*spec.rect_size) * h
        rw = rng.uniform(*spec.rect_size) * w
        y0 = rng.uniform(-0.5, h - 0.5 - rh)
        x0 = rng.uniform(-0.5, w - 0.5 - rw)
        rects.append((y0, y0 + rh, x0, x0 + rw, int(rng.integers(1, spec.classes)) if spec.classes > 1 else 0))
    scale = rng.uniform(*spec.illumination)
    slope = spec.illum_gradient * rng.uniform(-1, 1)
    return rects, scale, slope


def generate(spec: SceneSpec, seed: int, count: int, calib: CalibrationPair | None = None) -> list[LabeledSample]:
    spec.validate()
    sig = signatures(spec)
    calib = calib or make_calibration(spec)
    geom = spec.geometry
    h, w, t = spec.cube_height, spec.cube_width, spec.tile
    top, left, oh, ow = crop_offsets(h, w, spec.depth)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    a0, b0 = spec.active_top, spec.active_left
    dark = calib.dark[a0:a0 + h * t, b0:b0 + w * t].astype(np.float64)
    gain = (calib.flat - calib.dark)[a0:a0 + h * t, b0:b0 + w * t].astype(np.float64)
    ceiling = 2 ** spec.bit_depth - 1
    samples = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        rects, scale, slope = _scene(spec, rng)

        def illum(xs):
            return scale * (1 + slope * (xs / max(w - 1, 1) - 0.5))

        mosaic = np.empty((h * t, w * t))
        for b in range(spec.bands):
            i, j = geom.position_of(b)
            sy, sx = geom.shift(b)
            ys, xs = rows - sy, cols - sx  # physical sample position of this band
            lab = _label_field(rects, 0, ys, xs)
            refl = illum(xs) * sig[lab, b]
            if spec.noise_sigma > 0:
                refl = refl + rng.normal(0, spec.noise_sigma, refl.shape)
            mosaic[i::t, j::t] = np.clip(refl, 0, 1)
        frame = np.round(dark + mosaic * gain)
        full = np.round(calib.dark.astype(np.float64)).copy()
        full[a0:a0 + h * t, b0:b0 + w * t] = frame
        raw = RawFrame(np.clip(full, 0, ceiling).astype(np.uint16), spec.bit_depth)

        lab = _label_field(rects, 0, rows, cols)
        truth = np.clip(illum(cols)[..., None] * sig[lab], 0, 1).astype(np.float32)
        truth = truth[top:top + oh, left:left + ow]
        samples.append(LabeledSample(
            raw=raw,
            gt=np.ascontiguousarray(lab[top:top + oh, left:left + ow]),
            truth_cube=Tensor.from_array(truth, Layout.BIP),
            illumination=float(scale),
        ))
    return samples


def boundary_mask(labels: np.ndarray, radius: int = 2) -> np.ndarray:
    """True where a pixel lies within ``radius`` of the image border or a class boundary."""
    h, w = labels.shape
    mask = np.zeros((h, w), dtype=bool)
    mask[:radius] = mask[-radius:] = True
    mask[:, :radius] = mask[:, -radius:] = True
    pad = np.pad(labels, radius, mode="edge")
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            mask |= pad[radius + dy:radius + dy + h, radius + dx:radius + dx + w] != labels
    return mask


# ---------------------------------------------------------------------------
# stratified folds


def stratified_folds(label_maps, k: int = 5, classes: int | None = None) -> list[list[int]]:
    """Greedy stratification: sort by class histogram, deal round-robin into ``k`` folds."""
    label_maps = list(label_maps)
    if k < 3:
        raise ValueError("need at least 3 folds (train/val/test)")
    if len(label_maps) < k:
        raise DimensionError(f"{len(label_maps)} samples cannot fill {k} folds")
    classes = classes or int(max(m.max() for m in label_maps)) + 1
    hist = np.array([np.bincount(m.ravel(), minlength=classes)[:classes] / m.size for m in label_maps])
    rarity = np.argsort(hist.sum(axis=0))  # rarest class is the primary sort key
    keys = [tuple(-hist[i, rarity]) + (i,) for i in range(len(label_maps))]
    order = [i for *_, i in sorted(keys)]
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(idx)
    return [sorted(f) for f in folds]


def fold_rounds(folds: list[list[int]]):
    """Rotation schedule: round r tests on fold r, validates on fold r+1, trains on the rest."""
    k = len(folds)
    rounds = []
    for r in range(k):
        test, val = folds[r], folds[(r + 1) % k]
        train = sorted(i for f in range(k) if f not in (r, (r + 1) % k) for i in folds[f])
        rounds.append((train, sorted(val), sorted(test)))
    return rounds


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class Dataset:
    samples: list[LabeledSample]
    calib: CalibrationPair
    spec: SceneSpec
    ids: list[str] = field(default_factory=list)


def label_to_bytes(gt: np.ndarray) -> bytes:
    return pack_cube(b"HSLB", (gt.shape[0], gt.shape[1], 1), 0, gt.astype(np.uint8))


def label_from_bytes(blob: bytes, where="<bytes>") -> np.ndarray:
    (h, w, b), _, data = unpack_cube(blob, b"HSLB", where)
    if b != 1 or data.dtype != np.uint8:
        raise FormatError("label planes must be single-band u8", where)
    return data.reshape(h, w)


def write_dataset(directory, samples, calib: CalibrationPair, spec: SceneSpec, with_truth: bool = True) -> None:
    d = Path(directory)
    for sub in ("raw", "labels") + (("truth",) if with_truth else ()):
        (d / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        ids.append(sid)
        write_raw(d / "raw" / f"{sid}.hsrw", s.raw)
        (d / "labels" / f"{sid}.hslb").write_bytes(label_to_bytes(s.gt))
        if with_truth and s.truth_cube is not None:
            write_cube(d / "truth" / f"{sid}.hscb", s.truth_cube)
    write_calibration(d / "calib", calib)
    manifest = {
        "format": "hsicomp-dataset",
        "count": len(ids),
        "samples": [{"id": sid, "illumination": s.illumination} for sid, s in zip(ids, samples)],
        "spec": spec.to_dict(),
    }
    (d / "manifest").write_text(json.dumps(manifest, indent=1))


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise FormatError("missing manifest", str(mpath)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON at line {exc.lineno}", str(mpath)) from None
    if manifest.get("format") != "hsicomp-dataset":
        raise FormatError("not a dataset manifest", str(mpath))
    entries = manifest.get("samples", [])
    if manifest.get("count") != len(entries):
        raise FormatError(f"manifest count {manifest.get('count')} != {len(entries)} listed samples", str(mpath))
    spec = SceneSpec.from_dict(manifest["spec"])
    calib = read_calibration(d / "calib")
    samples, ids = [], []
    for e in entries:
        sid = e["id"]
        rpath = d / "raw" / f"{sid}.hsrw"
        lpath = d / "labels" / f"{sid}.hslb"
        for p in (rpath, lpath):
            if not p.exists():
                raise FormatError(f"sample {sid}: missing {p.parent.name} file", str(p))
        raw = read_raw(rpath, spec.bit_depth)
        gt = label_from_bytes(lpath.read_bytes(), str(lpath))
        tpath = d / "truth" / f"{sid}.hscb"
        truth = read_cube(tpath) if tpath.exists() else None
        samples.append(LabeledSample(raw, gt, truth, float(e.get("illumination", 1.0))))
        ids.append(sid)
    return Dataset(samples, calib, spec, ids)
