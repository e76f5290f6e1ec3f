"""Reconstruction quality: RGB PSNR and chroma-plane structural similarity (CSIM).

CSIM here is an interpretation: the standard Gaussian-window SSIM evaluated
separately on the CIELAB a and b planes (shifted by +128 onto a 0..255
scale) and averaged. It ignores lightness entirely, so two images with the
same chroma but different L score 1.0. The definition lives only in
:func:`csim` so it can be swapped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .color_space import Rgb8Image, denormalize_lab, lab_to_rgb, rgb_to_lab
from .grid_codec import GridSpec, decode_to_inputs, encode, relative_size_bound

__all__ = [
    "EvalRecord",
    "psnr",
    "csim",
    "ssim_plane",
    "gaussian_window",
    "reconstruct",
    "evaluate_model",
    "write_eval_csv",
    "EVAL_CSV_HEADER",
]

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
PEAK = 255.0

EVAL_CSV_HEADER = ("image", "psnr_db", "csim", "bytes", "raw_bytes", "relative_size", "bound")


def _check_same(a: Rgb8Image, b: Rgb8Image) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def psnr(a: Rgb8Image, b: Rgb8Image) -> float:
    """10*log10(255^2 / MSE) over every RGB sample; ``math.inf`` for identical images."""
    _check_same(a, b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def ssim_plane(x: np.ndarray, y: np.ndarray, data_range: float = PEAK) -> float:
    """Mean SSIM over every fully-contained 11x11 Gaussian window (no padding)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"plane shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < WINDOW:
        raise ValueError(f"planes must be at least {WINDOW}x{WINDOW}, got {x.shape}")
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def csim(a: Rgb8Image, b: Rgb8Image) -> float:
    _check_same(a, b)
    la, lb = rgb_to_lab(a), rgb_to_lab(b)
    s_a = ssim_plane(la.a_plane + 128.0, lb.a_plane + 128.0)
    s_b = ssim_plane(la.b_plane + 128.0, lb.b_plane + 128.0)
    return min(1.0, max(0.0, 0.5 * (s_a + s_b)))


@dataclass
class EvalRecord:
    image: str
    n: int
    psnr: float
    csim: float
    compressed_bytes: int
    raw_bytes: int
    relative_size: float
    bound: float

    def row(self) -> list:
        return [self.image, self.psnr, self.csim, self.compressed_bytes, self.raw_bytes,
                self.relative_size, self.bound]


def reconstruct(predictor, l: np.ndarray, ab: np.ndarray) -> Rgb8Image:
    """Run ``predictor`` on one (1,H,W) L plane + (2,H,W) hints and render RGB."""
    out = np.asarray(predictor(l[None], ab[None]))
    if out.shape != (1, 3) + l.shape[1:]:
        raise ValueError(f"predictor returned shape {out.shape}")
    return lab_to_rgb(denormalize_lab(out[0]).clamped())


def evaluate_model(predictor, images: Mapping[str, Rgb8Image], spec: GridSpec
                   ) -> tuple[list[EvalRecord], dict[str, float]]:
    """Encode each image, rebuild it with ``predictor`` and score the result.

    ``predictor`` maps (N,1,H,W) L and (N,2,H,W) hints to (N,3,H,W) normalized
    LAB; see :func:`crayon.crayon_net.as_predictor`.
    """
    if not images:
        raise ValueError("evaluate_model needs at least one image")
    records = []
    bound = relative_size_bound(spec.n)
    for name, img in images.items():
        cgc = encode(img, spec)
        l, hints = decode_to_inputs(cgc)
        rec = reconstruct(predictor, l, hints.ab)
        size = len(cgc.to_bytes())
        raw = 3 * img.width * img.height
        records.append(EvalRecord(name, spec.n, psnr(img, rec), csim(img, rec), size, raw,
                                  size / raw, bound))
    means = {
        "psnr": float(np.mean([r.psnr for r in records])),
        "csim": float(np.mean([r.csim for r in records])),
        "relative_size": float(np.mean([r.relative_size for r in records])),
        "bound": bound,
    }
    return records, means


def write_eval_csv(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_CSV_HEADER)
        for r in records:
            w.writerow(r.row())
