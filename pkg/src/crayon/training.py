"""Per-n training with canonical-model checkpointing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .crayon_net import CrayonModel, as_predictor, build_crayon, save_checkpoint
from .dataset import LazySamples, Sample, SplitManifest, batches, stack
from .grid_codec import GridSpec
from .metrics import psnr, reconstruct

__all__ = [
    "TrainingError",
    "TrainConfig",
    "EpochReport",
    "ab_loss",
    "train",
    "train_samples",
    "validate",
    "checkpoint_name",
    "EPOCH_CSV_HEADER",
]

log = logging.getLogger(__name__)

EPOCH_CSV_HEADER = ("epoch", "train_loss", "val_loss", "val_psnr", "canonical")


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, empty data)."""


@dataclass
class TrainConfig:
    n: int
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 8
    crop: int = 320
    seed: int = 0
    checkpoint_dir: str = "."

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop < 8 or self.crop % 8:
            raise ValueError(f"crop must be a positive multiple of 8, got {self.crop}")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_psnr: float
    canonical: bool

    def row(self) -> list:
        return [self.epoch, repr(self.train_loss), repr(self.val_loss), repr(self.val_psnr),
                int(self.canonical)]


def checkpoint_name(n: int) -> str:
    return f"crayon_n{n}_best.ckpt"


def ab_loss(model: CrayonModel, l: np.ndarray, hints: np.ndarray, target_ab: np.ndarray) -> nn.Tensor:
    """MSE between predicted and true normalized a, b. Channel 0 is a copy of L and is left out."""
    out = model(l, hints)
    return nn.mse_loss(nn.slice_channels(out, 1, 3), target_ab)


def validate(model, samples: Sequence[Sample], batch_size: int = 8) -> tuple[float, float]:
    """Mean RGB PSNR of the reconstructions and mean AB loss over ``samples``."""
    if not samples:
        raise ValueError("validate needs at least one sample")
    predictor = as_predictor(model)
    psnrs, losses = [], []
    for batch in batches(samples, batch_size):
        l, ab, target = stack(batch)
        out = np.asarray(predictor(l, ab))
        diff = out[:, 1:3].astype(np.float32) - target
        losses.extend(np.mean(diff * diff, axis=(1, 2, 3)).tolist())
        for i, s in enumerate(batch):
            rec = reconstruct(lambda *_: out[i : i + 1], s.l, s.hints.ab)
            psnrs.append(psnr(s.rgb, rec))
    if not psnrs:
        raise ValueError("validate found no loadable samples")
    return float(np.mean(psnrs)), float(np.mean(losses))


def _param_stats(model: CrayonModel) -> str:
    params = model.parameters()
    bad = [p.name for p in params if not np.isfinite(p.data).all()]
    if bad:
        return f"non-finite values in {', '.join(bad)}"
    worst = max(params, key=lambda p: float(np.max(np.abs(p.data))))
    return f"all parameters finite; largest |param| {float(np.max(np.abs(worst.data))):.4g} in {worst.name}"


def train_samples(config: TrainConfig, train_set: Sequence[Sample], val_set: Sequence[Sample],
                  model: CrayonModel | None = None) -> tuple[str, list[EpochReport], CrayonModel]:
    """Train on in-memory samples; returns (canonical checkpoint, reports, final model)."""
    if not train_set:
        raise TrainingError("no training samples")
    if not val_set:
        log.warning("no validation samples; validating on the training set")
        val_set = train_set
    out_dir = Path(config.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = str(out_dir / checkpoint_name(config.n))
    csv_path = out_dir / f"epochs_n{config.n}.csv"

    model = model if model is not None else build_crayon(config.seed)
    opt = nn.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    reports: list[EpochReport] = []
    best = -math.inf

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPOCH_CSV_HEADER)
        for epoch in range(1, config.epochs + 1):
            total, count = 0.0, 0
            for b, batch in enumerate(batches(train_set, config.batch_size, rng)):
                l, ab, target = stack(batch)
                opt.zero_grad()
                loss = ab_loss(model, l, ab, target)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, batch {b}; {_param_stats(model)}")
                nn.backward(loss)
                opt.step()
                total += value * len(batch)
                count += len(batch)
            if count == 0:
                raise TrainingError(f"epoch {epoch}: no loadable training samples")
            val_psnr, val_loss = validate(model, val_set, config.batch_size)
            canonical = val_psnr > best
            if canonical:
                best = val_psnr
                save_checkpoint(model, ckpt)
            report = EpochReport(epoch, total / count, val_loss, val_psnr, canonical)
            reports.append(report)
            writer.writerow(report.row())
            fh.flush()
            log.info("n=%d epoch %d: train %.6f val %.6f psnr %.3f%s", config.n, epoch,
                     report.train_loss, val_loss, val_psnr, " *" if canonical else "")
    return ckpt, reports, model


def train(config: TrainConfig, manifest: SplitManifest) -> tuple[str, list[EpochReport]]:
    """Train one model for grid spacing ``config.n`` from the manifest's train/val splits."""
    if not manifest.train_paths:
        raise TrainingError("manifest has no training images")
    spec = GridSpec(config.n)
    train_set = LazySamples(manifest.train_paths, config.crop, spec)
    val_set = LazySamples(manifest.val_paths, config.crop, spec)
    ckpt, reports, _ = train_samples(config, train_set, val_set)
    skipped = train_set.skipped | val_set.skipped
    if skipped:
        log.warning("skipped %d undecodable image(s)", len(skipped))
    return ckpt, reports
