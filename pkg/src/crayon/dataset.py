"""Imagenette-style ingestion: split manifests, cropping and training samples."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .color_space import Rgb8Image, rgb_to_lab, normalize_lab
from .grid_codec import GridSpec, HintPlanes, decode_to_inputs, encode_lab

__all__ = [
    "DatasetError",
    "SampleError",
    "SplitManifest",
    "Sample",
    "IMAGE_SUFFIXES",
    "build_manifest",
    "read_image",
    "center_crop",
    "sample_from_rgb",
    "load_sample",
    "load_samples",
    "LazySamples",
    "stack",
    "batches",
]

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".JPEG", ".JPG", ".PNG")


class DatasetError(RuntimeError):
    """The dataset tree is missing or contains unreadable entries."""


class SampleError(ValueError):
    """A single image could not be turned into a sample."""


@dataclass
class SplitManifest:
    train_paths: list[str]
    val_paths: list[str]
    test_paths: list[str]
    seed: int = 0

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#seed\t{self.seed}\n")
            for split, paths in (("train", self.train_paths), ("val", self.val_paths),
                                 ("test", self.test_paths)):
                for p in paths:
                    fh.write(f"{split}\t{p}\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        out = {"train": [], "val": [], "test": []}
        seed = 0
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                split, _, value = line.partition("\t")
                if split == "#seed":
                    seed = int(value)
                elif split in out:
                    out[split].append(value)
                else:
                    raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
        return cls(out["train"], out["val"], out["test"], seed)


def _list_images(root: Path) -> list[str]:
    return sorted(str(p) for p in root.rglob("*") if p.is_file() and p.suffix in IMAGE_SUFFIXES)


def build_manifest(root_dir, test_count: int = 50, seed: int = 0) -> SplitManifest:
    """Split ``<root>/train/**`` and ``<root>/val/**``; ``test_count`` val images become test."""
    root = Path(root_dir)
    missing = [str(root / sub) for sub in ("train", "val") if not (root / sub).is_dir()]
    if missing:
        raise DatasetError(f"missing dataset subtree(s): {', '.join(missing)}")
    train = _list_images(root / "train")
    val = _list_images(root / "val")
    unreadable = [p for p in train + val if not os.access(p, os.R_OK)]
    if unreadable:
        raise DatasetError(f"unreadable files: {', '.join(unreadable)}")
    if test_count < 0 or test_count > len(val):
        raise DatasetError(f"cannot move {test_count} of {len(val)} validation images to test")
    order = np.random.default_rng(seed).permutation(len(val))
    test_idx = set(order[:test_count].tolist())
    test = [val[i] for i in sorted(test_idx)]
    val = [p for i, p in enumerate(val) if i not in test_idx]
    return SplitManifest(train, val, test, seed)


def read_image(path) -> Rgb8Image:
    try:
        with Image.open(path) as im:
            return Rgb8Image(np.asarray(im.convert("RGB")))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise SampleError(f"cannot decode {path}: {exc}") from exc


def center_crop(img: Rgb8Image, crop: int) -> Rgb8Image:
    """Resize the shortest side to ``crop`` (bilinear) and cut the central square."""
    h, w = img.height, img.width
    scale = crop / min(h, w)
    nh, nw = max(crop, round(h * scale)), max(crop, round(w * scale))
    pil = Image.fromarray(img.data)
    if (nh, nw) != (h, w):
        pil = pil.resize((nw, nh), Image.BILINEAR)
    top, left = (nh - crop) // 2, (nw - crop) // 2
    arr = np.asarray(pil)[top : top + crop, left : left + crop]
    if arr.shape[:2] != (crop, crop):
        raise SampleError(f"image {w}x{h} cannot yield a {crop}x{crop} crop")
    return Rgb8Image(arr)


@dataclass
class Sample:
    l: np.ndarray  # (1, H, W), quantized exactly as a decoder would see it
    hints: HintPlanes
    target_ab: np.ndarray  # (2, H, W) normalized, unquantized
    source_path: str | None = None
    rgb: Rgb8Image | None = field(default=None, repr=False)


def sample_from_rgb(img: Rgb8Image, spec: GridSpec, source_path: str | None = None) -> Sample:
    if img.height % 8 or img.width % 8:
        raise SampleError(f"sample size {img.width}x{img.height} is not a multiple of 8")
    lab = rgb_to_lab(img)
    l, hints = decode_to_inputs(encode_lab(lab, spec))
    target = normalize_lab(lab)[1:]
    return Sample(l, hints, target, source_path, img)


def load_sample(path, crop: int, spec: GridSpec) -> Sample:
    if crop < 8 or crop % 8:
        raise ValueError(f"crop must be a positive multiple of 8, got {crop}")
    return sample_from_rgb(center_crop(read_image(path), crop), spec, str(path))


def load_samples(paths: Iterable, crop: int, spec: GridSpec,
                 skipped: list[str] | None = None) -> list[Sample]:
    """Load many samples; undecodable images are logged, recorded and skipped."""
    out = []
    for p in paths:
        try:
            out.append(load_sample(p, crop, spec))
        except SampleError as exc:
            log.warning("skipping %s: %s", p, exc)
            if skipped is not None:
                skipped.append(str(p))
    return out


class LazySamples(Sequence):
    """Samples decoded on access so large splits never sit in memory at once.

    Undecodable entries come back as ``None`` (and are logged once);
    :func:`batches` drops them.
    """

    def __init__(self, paths: Sequence, crop: int, spec: GridSpec):
        self.paths = list(paths)
        self.crop, self.spec = crop, spec
        self.skipped: set[str] = set()

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        path = self.paths[i]
        try:
            return load_sample(path, self.crop, self.spec)
        except SampleError as exc:
            if str(path) not in self.skipped:
                log.warning("skipping %s: %s", path, exc)
                self.skipped.add(str(path))
            return None


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (l, hint ab, target ab) with a leading N axis."""
    return (np.stack([s.l for s in samples]), np.stack([s.hints.ab for s in samples]),
            np.stack([s.target_ab for s in samples]))


def batches(samples: Sequence[Sample], batch_size: int,
            rng: np.random.Generator | None = None) -> Iterator[list[Sample]]:
    """Yield batches in a (possibly shuffled) order; the last batch may be short."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        batch = [samples[i] for i in order[start : start + batch_size]]
        batch = [s for s in batch if s is not None]
        if batch:
            yield batch
