"""Grayscale-plus-color-grid codec (the ``.cgc`` container).

An image is stored as its full 8-bit quantized lightness plane and the
chroma (a, b) of every n-th pixel along both axes. Everything else about the
color is discarded and has to be re-predicted by a decoder.

Container layout, little-endian, no padding::

    0   4s  magic b"CGC1"
    4   B   version (1; 2 when a grid phase is stored)
    5   I   width
    9   I   height
    13  H   n
    [v2 only] 15 H phase_row, 17 H phase_col
    ... W*H bytes of quantized L, row-major
    ... (a_q, b_q) byte pairs in row-major grid order
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .color_space import AB_SCALE, LabImage, Rgb8Image, lab_to_rgb, rgb_to_lab

__all__ = [
    "DecodeError",
    "GridSpec",
    "CgcFile",
    "HintPlanes",
    "grid_positions",
    "grid_axes",
    "encode",
    "encode_lab",
    "decode_to_inputs",
    "decode_lab",
    "relative_size_bound",
    "naive_fill_decode",
    "naive_fill_lab",
    "HEADER_SIZE",
]

MAGIC = b"CGC1"
_HEADER = struct.Struct("<4sBIIH")
_PHASE = struct.Struct("<HH")
HEADER_SIZE = _HEADER.size  # 15


class DecodeError(ValueError):
    """A CGC payload violates one of the container invariants."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    phase_row: int = 0
    phase_col: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid spacing n must be >= 1, got {self.n}")
        if self.n > 0xFFFF:
            raise ValueError(f"grid spacing n must fit in 16 bits, got {self.n}")
        if not (0 <= self.phase_row < self.n and 0 <= self.phase_col < self.n):
            raise ValueError(
                f"grid phase ({self.phase_row}, {self.phase_col}) must lie in [0, {self.n})")


def grid_axes(spec: GridSpec, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates of the retained grid lines."""
    if width < 1 or height < 1:
        raise ValueError(f"image dimensions must be positive, got {width}x{height}")
    rows = np.arange(spec.phase_row, height, spec.n)
    cols = np.arange(spec.phase_col, width, spec.n)
    return rows, cols


def grid_positions(spec: GridSpec, width: int, height: int) -> list[tuple[int, int]]:
    rows, cols = grid_axes(spec, width, height)
    return [(int(r), int(c)) for r in rows for c in cols]


def _sample_count(spec: GridSpec, width: int, height: int) -> int:
    rows = max(0, math.ceil((height - spec.phase_row) / spec.n))
    cols = max(0, math.ceil((width - spec.phase_col) / spec.n))
    return rows * cols


@dataclass
class CgcFile:
    width: int
    height: int
    n: int
    l_plane_q: np.ndarray  # (H, W) uint8
    ab_samples: np.ndarray  # (rows, cols, 2) uint8
    phase_row: int = 0
    phase_col: int = 0

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.n, self.phase_row, self.phase_col)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise DecodeError(f"dimensions must be positive, got {self.width}x{self.height}")
        if self.n < 1:
            raise DecodeError(f"grid spacing n must be >= 1, got {self.n}")
        if not (0 <= self.phase_row < self.n and 0 <= self.phase_col < self.n):
            raise DecodeError(f"grid phase ({self.phase_row}, {self.phase_col}) outside [0, {self.n})")
        if self.l_plane_q.size != self.width * self.height:
            raise DecodeError(
                f"len(l_plane_q) = {self.l_plane_q.size} but width*height = {self.width * self.height}")
        expected = _sample_count(self.spec, self.width, self.height)
        if self.ab_samples.size != 2 * expected:
            raise DecodeError(
                f"len(ab_samples) = {self.ab_samples.size // 2} pairs but the grid has {expected}")

    def to_bytes(self) -> bytes:
        self.validate()
        phased = self.phase_row or self.phase_col
        head = _HEADER.pack(MAGIC, 2 if phased else 1, self.width, self.height, self.n)
        if phased:
            head += _PHASE.pack(self.phase_row, self.phase_col)
        return (head + np.ascontiguousarray(self.l_plane_q, dtype=np.uint8).tobytes()
                + np.ascontiguousarray(self.ab_samples, dtype=np.uint8).tobytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CgcFile":
        if len(raw) < HEADER_SIZE:
            raise DecodeError(f"file is {len(raw)} bytes, shorter than the {HEADER_SIZE}-byte header")
        magic, version, width, height, n = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}, expected {MAGIC!r}")
        offset = HEADER_SIZE
        phase_row = phase_col = 0
        if version == 2:
            if len(raw) < offset + _PHASE.size:
                raise DecodeError("truncated phase header")
            phase_row, phase_col = _PHASE.unpack_from(raw, offset)
            offset += _PHASE.size
        elif version != 1:
            raise DecodeError(f"unsupported version {version}")
        if width < 1 or height < 1 or n < 1:
            raise DecodeError(f"invalid header: width={width} height={height} n={n}")
        if not (phase_row < n and phase_col < n):
            raise DecodeError(f"grid phase ({phase_row}, {phase_col}) outside [0, {n})")
        spec = GridSpec(n, phase_row, phase_col)
        rows, cols = (len(a) for a in grid_axes(spec, width, height))
        need = width * height + 2 * rows * cols
        if len(raw) - offset != need:
            raise DecodeError(
                f"payload is {len(raw) - offset} bytes; width*height + 2*samples requires {need}")
        buf = np.frombuffer(raw, dtype=np.uint8, offset=offset)
        l_q = buf[: width * height].reshape(height, width).copy()
        ab = buf[width * height :].reshape(rows, cols, 2).copy()
        return cls(width, height, n, l_q, ab, phase_row, phase_col)

    def write(self, path) -> int:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return len(data)

    @classmethod
    def read(cls, path) -> "CgcFile":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def nbytes(self) -> int:
        extra = _PHASE.size if (self.phase_row or self.phase_col) else 0
        return HEADER_SIZE + extra + self.l_plane_q.size + self.ab_samples.size


@dataclass
class HintPlanes:
    ab: np.ndarray  # (2, H, W) float32, normalized chroma
    mask: np.ndarray = field(repr=False)  # (H, W) bool


def _quantize_l(l_plane: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(l_plane.astype(np.float64) * 255.0 / 100.0 + 0.5), 0, 255).astype(np.uint8)


def _quantize_ab(ab: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(ab.astype(np.float64) + 0.5) + 128, 0, 255).astype(np.uint8)


def encode_lab(lab: LabImage, spec: GridSpec) -> CgcFile:
    rows, cols = grid_axes(spec, lab.width, lab.height)
    sel = np.ix_(rows, cols)
    ab = np.stack([lab.a_plane[sel], lab.b_plane[sel]], axis=-1)
    return CgcFile(lab.width, lab.height, spec.n, _quantize_l(lab.l_plane), _quantize_ab(ab),
                   spec.phase_row, spec.phase_col)


def encode(img: Rgb8Image, spec: GridSpec) -> CgcFile:
    """Keep quantized L everywhere and quantized a, b on the grid only."""
    return encode_lab(rgb_to_lab(img), spec)


def _dequant_l(file: CgcFile) -> np.ndarray:
    return file.l_plane_q.astype(np.float32) * np.float32(100.0 / 255.0)


def _dequant_ab(file: CgcFile) -> np.ndarray:
    return file.ab_samples.astype(np.float32) - np.float32(128.0)


def decode_to_inputs(file: CgcFile) -> tuple[np.ndarray, HintPlanes]:
    """Network inputs: normalized L (1, H, W) and sparse normalized chroma hints."""
    file.validate()
    h, w = file.height, file.width
    l = (file.l_plane_q.astype(np.float32) / np.float32(255.0))[None]
    rows, cols = grid_axes(file.spec, w, h)
    ab = np.zeros((2, h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    sel = np.ix_(rows, cols)
    samples = _dequant_ab(file) / np.float32(AB_SCALE)
    ab[0][sel] = samples[..., 0]
    ab[1][sel] = samples[..., 1]
    mask[sel] = True
    return l, HintPlanes(ab, mask)


def decode_lab(file: CgcFile) -> tuple[np.ndarray, np.ndarray]:
    """Dequantized L plane and the (rows, cols, 2) grid chroma in LAB units."""
    file.validate()
    return _dequant_l(file), _dequant_ab(file)


def relative_size_bound(n: int) -> float:
    """Upper bound on compressed/raw size: a gray plane plus one chroma pair per n*n block."""
    if n < 1:
        raise ValueError(f"grid spacing n must be >= 1, got {n}")
    return 1.0 / 3.0 + 1.0 / (n * n)


def _nearest_index(coords: np.ndarray, length: int) -> np.ndarray:
    # coords is sorted and evenly spaced; ties go to the smaller coordinate.
    pos = np.arange(length)
    right = np.clip(np.searchsorted(coords, pos, side="left"), 0, len(coords) - 1)
    left = np.clip(right - 1, 0, len(coords) - 1)
    take_left = np.abs(pos - coords[left]) <= np.abs(coords[right] - pos)
    return np.where(take_left, left, right)


def naive_fill_lab(file: CgcFile) -> LabImage:
    """Spread each grid sample to the pixels nearest to it (no learning involved)."""
    file.validate()
    if file.ab_samples.size == 0:
        raise DecodeError("file holds zero grid samples")
    rows, cols = grid_axes(file.spec, file.width, file.height)
    ri = _nearest_index(rows, file.height)
    ci = _nearest_index(cols, file.width)
    ab = _dequant_ab(file)[np.ix_(ri, ci)]
    return LabImage(_dequant_l(file), ab[..., 0], ab[..., 1])


def naive_fill_decode(file: CgcFile) -> Rgb8Image:
    return lab_to_rgb(naive_fill_lab(file))
