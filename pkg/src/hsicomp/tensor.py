"""Layout-tagged 3-D cubes (BSQ / BIP) and the HSCB container."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, LayoutError


class Layout(enum.IntEnum):
    BSQ = 0  # band-major: offset = b*H*W + r*W + c
    BIP = 1  # pixel-major: offset = (r*W + c)*B + b


class Elem(enum.Enum):
    F32 = "f32"
    U16 = "u16"
    I8 = "i8"  # quantized, paired with a power-of-two scale exponent


_NP_DTYPE = {Elem.F32: np.dtype("<f4"), Elem.U16: np.dtype("<u2"), Elem.I8: np.dtype("i1")}


def elem_of(dtype) -> Elem:
    dtype = np.dtype(dtype)
    for elem, dt in _NP_DTYPE.items():
        if dt == dtype.newbyteorder("<") or dt == dtype:
            return elem
    raise TypeError(f"unsupported element type {dtype}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """A height x width x bands cube stored as one flat buffer in ``layout`` order.

    ``scale_exp`` is only meaningful for ``Elem.I8``: value = q * 2**scale_exp.
    """

    height: int
    width: int
    bands: int
    layout: Layout
    data: np.ndarray
    scale_exp: int | None = None

    def __post_init__(self):
        if self.data.ndim != 1:
            raise DimensionError("tensor buffer must be one-dimensional")
        if self.data.size != self.height * self.width * self.bands:
            raise DimensionError(
                f"buffer holds {self.data.size} elements, expected "
                f"{self.height}x{self.width}x{self.bands}"
            )
        elem = elem_of(self.data.dtype)
        if (elem is Elem.I8) != (self.scale_exp is not None):
            raise DimensionError("scale_exp is required for, and only for, i8 tensors")

    @property
    def elem(self) -> Elem:
        return elem_of(self.data.dtype)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.bands)

    @classmethod
    def from_array(cls, arr: np.ndarray, layout: Layout, scale_exp=None) -> "Tensor":
        """Wrap a (B, H, W) array for BSQ or an (H, W, B) array for BIP."""
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise DimensionError(f"expected a 3-D array, got shape {arr.shape}")
        if layout is Layout.BSQ:
            b, h, w = arr.shape
        else:
            h, w, b = arr.shape
        data = np.ascontiguousarray(arr).reshape(-1).copy()
        return cls(h, w, b, Layout(layout), data, scale_exp)

    def array(self) -> np.ndarray:
        """Read-only view shaped (B, H, W) for BSQ or (H, W, B) for BIP."""
        if self.layout is Layout.BSQ:
            view = self.data.reshape(self.bands, self.height, self.width)
        else:
            view = self.data.reshape(self.height, self.width, self.bands)
        view = view.view()
        view.flags.writeable = False
        return view

    def hwb(self) -> np.ndarray:
        """Logical (H, W, B) view regardless of storage layout."""
        a = self.array()
        return a if self.layout is Layout.BIP else a.transpose(1, 2, 0)

    def offset(self, r: int, c: int, b: int) -> int:
        if self.layout is Layout.BSQ:
            return b * self.height * self.width + r * self.width + c
        return (r * self.width + c) * self.bands + b

    def require(self, layout: Layout, what: str = "operation"):
        if self.layout is not layout:
            raise LayoutError(f"{what} requires {layout.name} input, got {self.layout.name}")

    def equals(self, other: "Tensor") -> bool:
        """Bitwise equality of shape, layout, element type and payload."""
        return (
            self.shape == other.shape
            and self.layout == other.layout
            and self.data.dtype == other.data.dtype
            and self.scale_exp == other.scale_exp
            and self.data.tobytes() == other.data.tobytes()
        )


def convert_layout(t: Tensor, target: Layout) -> Tensor:
    """Copy ``t`` into ``target`` layout; same-layout conversion is a plain copy."""
    target = Layout(target)
    if target is t.layout:
        return Tensor(t.height, t.width, t.bands, t.layout, t.data.copy(), t.scale_exp)
    if target is Layout.BIP:
        arr = t.array().transpose(1, 2, 0)
    else:
        arr = t.array().transpose(2, 0, 1)
    return Tensor(t.height, t.width, t.bands, target, np.ascontiguousarray(arr).reshape(-1), t.scale_exp)


def at(t: Tensor, r: int, c: int, b: int):
    if not (0 <= r < t.height and 0 <= c < t.width and 0 <= b < t.bands):
        raise IndexError(f"index ({r}, {c}, {b}) out of range for {t.shape}")
    return t.data[t.offset(r, c, b)]


def crop(t: Tensor, top: int, left: int, out_h: int, out_w: int) -> Tensor:
    if min(top, left) < 0 or out_h <= 0 or out_w <= 0:
        raise DimensionError(f"invalid crop window ({top}, {left}, {out_h}, {out_w})")
    if top + out_h > t.height or left + out_w > t.width:
        raise DimensionError(
            f"crop window ({top}, {left}, {out_h}, {out_w}) exceeds {t.height}x{t.width}"
        )
    a = t.array()
    if t.layout is Layout.BSQ:
        win = a[:, top:top + out_h, left:left + out_w]
    else:
        win = a[top:top + out_h, left:left + out_w, :]
    return Tensor(out_h, out_w, t.bands, t.layout, np.ascontiguousarray(win).reshape(-1), t.scale_exp)


# ---------------------------------------------------------------------------
# Binary containers. All share: 4-byte magic, little-endian u32 dims, u8 tags,
# zero padding up to the next 16-byte boundary, then the raw LE payload.

DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("u1")}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


def _padded(n: int) -> int:
    return (n + 15) // 16 * 16


def _dtype_tag(dtype) -> int:
    dtype = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _TAG_OF[dtype]
    except KeyError:
        raise FormatError(f"dtype {dtype} cannot be stored") from None


def pack_cube(magic: bytes, dims: tuple[int, int, int], layout: int, payload: np.ndarray) -> bytes:
    tag = _dtype_tag(payload.dtype)
    head = magic + struct.pack("<IIIBB", *dims, layout, tag)
    head += b"\0" * (_padded(len(head)) - len(head))
    return head + np.ascontiguousarray(payload).astype(DTYPE_TAGS[tag], copy=False).tobytes()


def unpack_cube(blob: bytes, magic: bytes, where="<bytes>"):
    """Parse an HSCB-style container; returns (dims, layout_tag, flat payload)."""
    fixed = 4 + struct.calcsize("<IIIBB")
    hsize = _padded(fixed)
    if len(blob) < hsize:
        raise FormatError(f"truncated header ({len(blob)} bytes)", where)
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}", where)
    h, w, b, layout, tag = struct.unpack_from("<IIIBB", blob, 4)
    if any(blob[fixed:hsize]):
        raise FormatError("nonzero header padding", where)
    if layout not in (0, 1):
        raise FormatError(f"unknown layout tag {layout}", where)
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}", where)
    if min(h, w, b) == 0:
        raise FormatError(f"empty dimensions {h}x{w}x{b}", where)
    dtype = DTYPE_TAGS[tag]
    expected = h * w * b * dtype.itemsize
    if len(blob) - hsize != expected:
        raise FormatError(f"payload is {len(blob) - hsize} bytes, header declares {expected}", where)
    data = np.frombuffer(blob, dtype=dtype, offset=hsize).copy()
    return (h, w, b), layout, data


def cube_to_bytes(t: Tensor) -> bytes:
    if t.elem is Elem.I8:
        raise FormatError("i8 tensors have no HSCB dtype tag")
    return pack_cube(b"HSCB", t.shape, int(t.layout), t.data)


def cube_from_bytes(blob: bytes, where="<bytes>") -> Tensor:
    (h, w, b), layout, data = unpack_cube(blob, b"HSCB", where)
    if data.dtype == np.dtype("u1"):
        raise FormatError("u8 payload is not a valid cube element type", where)
    return Tensor(h, w, b, Layout(layout), data.astype(data.dtype.newbyteorder("=")))


def write_cube(path, t: Tensor) -> None:
    Path(path).write_bytes(cube_to_bytes(t))


def read_cube(path) -> Tensor:
    return cube_from_bytes(Path(path).read_bytes(), str(path))
