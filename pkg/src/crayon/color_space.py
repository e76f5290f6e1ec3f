"""sRGB <-> CIELAB conversion (D65) and network-facing normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rgb8Image",
    "LabImage",
    "rgb_to_lab",
    "lab_to_rgb",
    "normalize_lab",
    "denormalize_lab",
    "L_SCALE",
    "AB_SCALE",
]

L_SCALE = 100.0
AB_SCALE = 128.0

# IEC 61966-2-1 linear sRGB -> XYZ, D65.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# White point taken from the matrix itself so that (255,255,255) maps to a=b=0.
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

_DELTA = 6.0 / 29.0


@dataclass
class Rgb8Image:
    """Row-major interleaved 8-bit RGB, stored as an (H, W, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be positive, got {arr.shape[:2]}")
        if arr.dtype != np.uint8:
            if np.issubdtype(arr.dtype, np.integer) and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("pixel values outside 0..255")
            arr = arr.astype(np.uint8)
        self.data = arr

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    @classmethod
    def frombytes(cls, width: int, height: int, raw: bytes) -> "Rgb8Image":
        if len(raw) != width * height * 3:
            raise ValueError(f"expected {width * height * 3} bytes, got {len(raw)}")
        return cls(np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy())


@dataclass
class LabImage:
    """Planar CIELAB image with float32 planes of shape (H, W)."""

    l_plane: np.ndarray
    a_plane: np.ndarray
    b_plane: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=np.float32) for p in (self.l_plane, self.a_plane, self.b_plane)]
        shape = planes[0].shape
        if len(shape) != 2 or min(shape) < 1:
            raise ValueError(f"LAB planes must be non-empty 2-D arrays, got {shape}")
        if any(p.shape != shape for p in planes):
            raise ValueError("LAB planes differ in shape")
        self.l_plane, self.a_plane, self.b_plane = planes

    @property
    def width(self) -> int:
        return self.l_plane.shape[1]

    @property
    def height(self) -> int:
        return self.l_plane.shape[0]

    def clamped(self) -> "LabImage":
        return LabImage(
            np.clip(self.l_plane, 0.0, 100.0),
            np.clip(self.a_plane, -128.0, 127.0),
            np.clip(self.b_plane, -128.0, 127.0),
        )


def _srgb_decode(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(img: Rgb8Image) -> LabImage:
    lin = _srgb_decode(img.data.astype(np.float64) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE
    fx, fy, fz = (_f(xyz[..., i]) for i in range(3))
    lab = LabImage(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
    return lab.clamped()


def lab_to_rgb(img: LabImage) -> Rgb8Image:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut colors are clipped per channel."""
    L = img.l_plane.astype(np.float64)
    fy = (L + 16.0) / 116.0
    fx = fy + img.a_plane.astype(np.float64) / 500.0
    fz = fy - img.b_plane.astype(np.float64) / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * _WHITE
    rgb = _srgb_encode(xyz @ _XYZ_TO_RGB.T)
    return Rgb8Image(np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8))


def normalize_lab(img: LabImage) -> np.ndarray:
    """(3, H, W) float32: L/100 in [0, 1], a/128 and b/128 in [-1, 1)."""
    return np.stack(
        [img.l_plane / np.float32(L_SCALE), img.a_plane / np.float32(AB_SCALE),
         img.b_plane / np.float32(AB_SCALE)]
    ).astype(np.float32)


def denormalize_lab(x: np.ndarray) -> LabImage:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) array, got {x.shape}")
    return LabImage(x[0] * np.float32(L_SCALE), x[1] * np.float32(AB_SCALE), x[2] * np.float32(AB_SCALE))
