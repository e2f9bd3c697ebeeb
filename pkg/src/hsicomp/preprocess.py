"""Raw snapshot-mosaic frame -> model-ready BIP cube.

Steps run in the order of the reference deployment: crop/clip the raw frame,
reflectance correction, partial demosaic, band alignment (all on BSQ data),
centered crop to a multiple of ``2**depth``, BSQ->BIP conversion, per-pixel
normalization and per-channel clipping (on BIP data). Symmetric normalization
is available as a separate step for networks without a fused input layer.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError, DimensionError, FormatError
from .tensor import DTYPE_TAGS, Layout, Tensor, _dtype_tag, _padded, convert_layout, crop

CALIB_EPS = 1e-6


@dataclass
class RawFrame:
    data: np.ndarray  # (H, W) uint16, row-major
    bit_depth: int = 10

    @property
    def shape(self):
        return self.data.shape


@dataclass
class CalibrationPair:
    dark: np.ndarray  # f32 planes, same shape as the frame they correct
    flat: np.ndarray

    def window(self, top, left, h, w) -> "CalibrationPair":
        if top + h > self.dark.shape[0] or left + w > self.dark.shape[1]:
            raise DimensionError(f"calibration planes {self.dark.shape} smaller than window")
        return CalibrationPair(
            np.ascontiguousarray(self.dark[top:top + h, left:left + w], dtype=np.float32),
            np.ascontiguousarray(self.flat[top:top + h, left:left + w], dtype=np.float32),
        )


@dataclass(frozen=True)
class MosaicGeometry:
    """5x5 filter tile; band index = tile * i + j for tile position (i, j).

    ``misaligned`` says whether bands sit at their physical sub-pixel tile
    offsets (the real sensor) or are all sampled at the reference position.
    """

    tile: int = 5
    reference: tuple[int, int] = (2, 2)
    misaligned: bool = True

    @property
    def bands(self) -> int:
        return self.tile * self.tile

    def band_of(self, i: int, j: int) -> int:
        return self.tile * i + j

    def position_of(self, band: int) -> tuple[int, int]:
        return divmod(band, self.tile)

    def shift(self, band: int) -> tuple[float, float]:
        """Fractional sample offset (rows, cols) that aligns ``band`` to the reference."""
        if not self.misaligned:
            return (0.0, 0.0)
        i, j = self.position_of(band)
        return ((self.reference[0] - i) / self.tile, (self.reference[1] - j) / self.tile)


@dataclass
class ChannelStats:
    th: np.ndarray
    min: np.ndarray
    max: np.ndarray

    def save(self, path) -> None:
        doc = {k: [float(v) for v in getattr(self, k)] for k in ("th", "min", "max")}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "ChannelStats":
        try:
            doc = json.loads(Path(path).read_text())
            arrs = {k: np.asarray(doc[k], dtype=np.float32) for k in ("th", "min", "max")}
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed channel stats: {exc}", str(path)) from None
        if len({a.shape for a in arrs.values()}) != 1:
            raise FormatError("th/min/max lengths differ", str(path))
        return cls(**arrs)


@dataclass
class PreprocessConfig:
    cube_height: int = 216
    cube_width: int = 409
    crop_top: int = 0
    crop_left: int = 0
    bit_depth: int = 10
    coverage: float = 0.9995
    reference: tuple[int, int] = (2, 2)
    misaligned: bool = True
    depth: int = 5
    tile: int = 5

    @property
    def geometry(self) -> MosaicGeometry:
        return MosaicGeometry(self.tile, tuple(self.reference), self.misaligned)

    @property
    def active_shape(self) -> tuple[int, int]:
        return (self.cube_height * self.tile, self.cube_width * self.tile)

    def output_shape(self) -> tuple[int, int, int]:
        m = 2 ** self.depth
        return (self.cube_height // m * m, self.cube_width // m * m, self.tile * self.tile)

    def to_dict(self):
        d = asdict(self)
        d["reference"] = list(self.reference)
        return d

    @classmethod
    def from_dict(cls, d) -> "PreprocessConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown preprocess keys: {sorted(unknown)}")
        d = dict(d)
        if "reference" in d:
            d["reference"] = tuple(d["reference"])
        return cls(**d)


# ---------------------------------------------------------------------------
# steps


def crop_and_clip(raw: RawFrame, cfg: PreprocessConfig) -> RawFrame:
    ah, aw = cfg.active_shape
    top, left = cfg.crop_top, cfg.crop_left
    h, w = raw.data.shape
    if top + ah > h or left + aw > w:
        raise DimensionError(f"raw frame {h}x{w} smaller than active window {ah}x{aw}+({top},{left})")
    ceiling = (1 << cfg.bit_depth) - 1
    out = np.minimum(raw.data[top:top + ah, left:left + aw], ceiling).astype(np.uint16)
    return RawFrame(np.ascontiguousarray(out), cfg.bit_depth)


def reflectance_correct(raw: RawFrame, calib: CalibrationPair) -> np.ndarray:
    if raw.data.shape != calib.dark.shape or raw.data.shape != calib.flat.shape:
        raise DimensionError(
            f"frame {raw.data.shape} vs calibration {calib.dark.shape}/{calib.flat.shape}"
        )
    gain = calib.flat.astype(np.float32) - calib.dark.astype(np.float32)
    bad = gain < CALIB_EPS
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise CalibrationError(
            f"flat - dark = {gain[r, c]:g} < {CALIB_EPS:g} at pixel ({r}, {c})"
        )
    out = (raw.data.astype(np.float32) - calib.dark.astype(np.float32)) / gain
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def demosaic(frame: np.ndarray, geom: MosaicGeometry = MosaicGeometry()) -> Tensor:
    """Partial demosaic: one value per band per tile, BSQ output."""
    t = geom.tile
    h, w = frame.shape
    if h % t or w % t:
        raise DimensionError(f"frame {h}x{w} not divisible by tile size {t}")
    rows, cols = h // t, w // t
    # frame[t*r + i, t*c + j] -> cube[band_of(i, j), r, c]
    cube = frame.reshape(rows, t, cols, t).transpose(1, 3, 0, 2).reshape(t * t, rows, cols)
    return Tensor.from_array(cube.astype(np.float32, copy=False), Layout.BSQ)


def _bilinear(plane: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Sample ``plane`` at (r + dy, c + dx) with clamp-to-edge indices."""
    h, w = plane.shape
    fy0 = math.floor(dy)
    fx0 = math.floor(dx)
    fy = np.float32(dy - fy0)
    fx = np.float32(dx - fx0)
    rows0 = np.clip(np.arange(h) + fy0, 0, h - 1)
    rows1 = np.clip(np.arange(h) + fy0 + 1, 0, h - 1)
    cols0 = np.clip(np.arange(w) + fx0, 0, w - 1)
    cols1 = np.clip(np.arange(w) + fx0 + 1, 0, w - 1)
    top = plane[rows0]
    bot = plane[rows1]
    # lerp form keeps constant regions bit-exact
    t = top[:, cols0] + fx * (top[:, cols1] - top[:, cols0])
    b = bot[:, cols0] + fx * (bot[:, cols1] - bot[:, cols0])
    return t + fy * (b - t)


def align_bands(cube: Tensor, geom: MosaicGeometry = MosaicGeometry()) -> Tensor:
    cube.require(Layout.BSQ, "align_bands")
    if cube.bands != geom.bands:
        raise DimensionError(f"cube has {cube.bands} bands, geometry expects {geom.bands}")
    src = cube.array()
    out = np.empty_like(src)
    for b in range(cube.bands):
        dy, dx = geom.shift(b)
        if dy == 0 and dx == 0:
            out[b] = src[b]
        else:
            out[b] = _bilinear(src[b], dy, dx)
    return Tensor.from_array(out, Layout.BSQ)


def crop_offsets(h: int, w: int, depth: int) -> tuple[int, int, int, int]:
    m = 2 ** depth
    oh, ow = h // m * m, w // m * m
    if oh == 0 or ow == 0:
        raise DimensionError(f"{h}x{w} smaller than one {m}x{m} tile")
    return (h - oh) // 2, (w - ow) // 2, oh, ow


def crop_to_multiple(cube: Tensor, depth: int = 5) -> Tensor:
    cube.require(Layout.BSQ, "crop_to_multiple")
    top, left, oh, ow = crop_offsets(cube.height, cube.width, depth)
    return crop(cube, top, left, oh, ow)


def pixel_normalize(cube: Tensor) -> Tensor:
    cube.require(Layout.BIP, "pixel_normalize")
    x = cube.array()
    s = x.sum(axis=2, keepdims=True, dtype=np.float32)
    safe = np.where(s == 0, np.float32(1), s)
    out = np.where(s == 0, np.float32(0), x / safe).astype(np.float32)
    return Tensor.from_array(out, Layout.BIP)


def compute_clip_thresholds(cubes, coverage: float = 0.9995) -> ChannelStats:
    cubes = list(cubes)
    if not cubes:
        raise DimensionError("no cubes to compute thresholds from")
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    for c in cubes:
        c.require(Layout.BIP, "compute_clip_thresholds")
    bands = cubes[0].bands
    pix = np.concatenate([c.array().reshape(-1, bands) for c in cubes], axis=0).astype(np.float64)
    th = np.quantile(pix, coverage, axis=0)
    lo = np.min(np.minimum(pix, th), axis=0)
    return ChannelStats(th.astype(np.float32), lo.astype(np.float32), th.astype(np.float32))


def clip_channels(cube: Tensor, stats: ChannelStats) -> Tensor:
    cube.require(Layout.BIP, "clip_channels")
    return Tensor.from_array(np.minimum(cube.array(), stats.th.astype(np.float32)), Layout.BIP)


def symmetric_normalize(cube: Tensor, stats: ChannelStats) -> Tensor:
    cube.require(Layout.BIP, "symmetric_normalize")
    lo = stats.min.astype(np.float32)
    hi = stats.max.astype(np.float32)
    if np.any(hi <= lo):
        b = int(np.argmax(hi <= lo))
        raise DimensionError(f"degenerate channel {b}: min {lo[b]} >= max {hi[b]}")
    out = np.float32(2) * (cube.array() - lo) / (hi - lo) - np.float32(1)
    return Tensor.from_array(out.astype(np.float32), Layout.BIP)


# ---------------------------------------------------------------------------
# composition, split along the profiled step boundaries

def to_bip_cropped(cube: Tensor, depth: int) -> Tensor:
    return convert_layout(crop_to_multiple(cube, depth), Layout.BIP)


def clip_and_normalize(cube: Tensor, stats: ChannelStats | None) -> Tensor:
    cube = pixel_normalize(cube)
    return cube if stats is None else clip_channels(cube, stats)


def run_preprocess(raw: RawFrame, calib: CalibrationPair, stats: ChannelStats | None,
                   cfg: PreprocessConfig = PreprocessConfig(), *, symmetric: bool = False) -> Tensor:
    """Full chain. ``calib`` may cover the whole frame or only the active window.

    ``stats=None`` skips channel clipping (used when computing thresholds).
    ``symmetric=True`` appends symmetric normalization for unfused networks.
    """
    calib = active_calibration(calib, raw.data.shape, cfg)
    geom = cfg.geometry
    frame = reflectance_correct(crop_and_clip(raw, cfg), calib)
    cube = align_bands(demosaic(frame, geom), geom)
    cube = clip_and_normalize(to_bip_cropped(cube, cfg.depth), stats)
    if symmetric:
        if stats is None:
            raise ValueError("symmetric normalization needs channel stats")
        cube = symmetric_normalize(cube, stats)
    return cube


def active_calibration(calib: CalibrationPair, frame_shape, cfg: PreprocessConfig) -> CalibrationPair:
    ah, aw = cfg.active_shape
    if calib.dark.shape == (ah, aw):
        return calib
    if calib.dark.shape != tuple(frame_shape):
        raise DimensionError(
            f"calibration {calib.dark.shape} matches neither frame {tuple(frame_shape)} nor window {(ah, aw)}"
        )
    return calib.window(cfg.crop_top, cfg.crop_left, ah, aw)


# ---------------------------------------------------------------------------
# HSRW container: magic, u32 H, u32 W, u8 dtype tag, zero pad to 16, payload

def plane_to_bytes(plane: np.ndarray) -> bytes:
    if plane.ndim != 2:
        raise DimensionError("HSRW stores 2-D planes only")
    tag = _dtype_tag(plane.dtype)
    head = b"HSRW" + struct.pack("<IIB", plane.shape[0], plane.shape[1], tag)
    head += b"\0" * (_padded(len(head)) - len(head))
    return head + np.ascontiguousarray(plane).astype(DTYPE_TAGS[tag], copy=False).tobytes()


def plane_from_bytes(blob: bytes, where="<bytes>") -> np.ndarray:
    fixed = 4 + struct.calcsize("<IIB")
    hsize = _padded(fixed)
    if len(blob) < hsize:
        raise FormatError(f"truncated header ({len(blob)} bytes)", where)
    if blob[:4] != b"HSRW":
        raise FormatError(f"bad magic {blob[:4]!r}", where)
    h, w, tag = struct.unpack_from("<IIB", blob, 4)
    if any(blob[fixed:hsize]):
        raise FormatError("nonzero header padding", where)
    if tag not in (0, 1):
        raise FormatError(f"dtype tag {tag} invalid for HSRW", where)
    if h == 0 or w == 0:
        raise FormatError(f"empty dimensions {h}x{w}", where)
    dtype = DTYPE_TAGS[tag]
    if len(blob) - hsize != h * w * dtype.itemsize:
        raise FormatError(
            f"payload is {len(blob) - hsize} bytes, header declares {h * w * dtype.itemsize}", where
        )
    return np.frombuffer(blob, dtype=dtype, offset=hsize).reshape(h, w).astype(dtype.newbyteorder("="))


def write_raw(path, raw: RawFrame) -> None:
    Path(path).write_bytes(plane_to_bytes(raw.data.astype(np.uint16, copy=False)))


def read_raw(path, bit_depth: int = 10) -> RawFrame:
    plane = plane_from_bytes(Path(path).read_bytes(), str(path))
    if plane.dtype != np.uint16:
        raise FormatError("raw frame must hold u16 samples", str(path))
    return RawFrame(plane, bit_depth)


def write_calibration(directory, calib: CalibrationPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "dark.hsrw").write_bytes(plane_to_bytes(calib.dark.astype(np.float32)))
    (d / "flat.hsrw").write_bytes(plane_to_bytes(calib.flat.astype(np.float32)))


def read_calibration(directory) -> CalibrationPair:
    d = Path(directory)
    planes = []
    for name in ("dark.hsrw", "flat.hsrw"):
        p = d / name
        if not p.exists():
            raise FormatError("missing calibration plane", str(p))
        plane = plane_from_bytes(p.read_bytes(), str(p))
        if plane.dtype != np.float32:
            raise FormatError("calibration planes must be f32", str(p))
        planes.append(plane)
    if planes[0].shape != planes[1].shape:
        raise FormatError("dark and flat shapes differ", str(d))
    return CalibrationPair(*planes)
