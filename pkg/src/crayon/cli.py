"""``crayon`` command-line entry point: encode, decode, train, eval and sweep.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Set ``CRAYON_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from PIL import Image

from .color_space import Rgb8Image
from .crayon_net import DOWNSAMPLE, as_predictor, load_checkpoint
from .dataset import IMAGE_SUFFIXES, SampleError, build_manifest, center_crop, read_image
from .grid_codec import CgcFile, GridSpec, decode_to_inputs, encode, naive_fill_decode, relative_size_bound
from .metrics import evaluate_model, reconstruct, write_eval_csv
from .training import TrainConfig, checkpoint_name, train

__all__ = ["main", "SweepConfig", "run_sweep", "write_summary_csv", "DEFAULT_N_VALUES", "SUMMARY_HEADER"]

log = logging.getLogger("crayon")

DEFAULT_N_VALUES = (6, 15, 20, 40, 50, 60, 80, 100)
SUMMARY_HEADER = ("n", "mean_psnr", "mean_csim", "mean_relative_size", "bound")


class UsageError(Exception):
    """Bad arguments discovered after parsing; maps to exit status 2."""


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return v


def _phase(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"phase must look like 'row,col', got {text!r}") from None
    return r, c


def _n_list(text: str) -> list[int]:
    values = [_positive_int(v) for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("need at least one n value")
    return values


def _write_image(img: Rgb8Image, path: Path) -> None:
    """Encode fully in memory first so a failure never leaves a partial file."""
    fmt = Image.registered_extensions().get(path.suffix.lower())
    if fmt is None:
        raise UsageError(f"unknown image extension {path.suffix!r} for {path}")
    buf = io.BytesIO()
    Image.fromarray(img.data).save(buf, format=fmt)
    path.write_bytes(buf.getvalue())


# --- commands -------------------------------------------------------------

def cmd_encode(args) -> int:
    try:
        spec = GridSpec(args.n, *(args.phase or (0, 0)))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    img = read_image(args.in_image)
    cgc = encode(img, spec)
    size = cgc.write(args.out_cgc)
    raw = 3 * img.width * img.height
    bound = relative_size_bound(spec.n)
    if bound > 1:
        log.warning("n=%d: the relative size bound %.4f exceeds 1; this setting does not compress",
                    spec.n, bound)
    print(f"{args.out_cgc}: {size} bytes, relative size {size / raw:.6f} (bound {bound:.6f})")
    return 0


def cmd_decode(args) -> int:
    cgc = CgcFile.read(args.in_cgc)
    if args.naive:
        img = naive_fill_decode(cgc)
    else:
        for axis, size in (("height", cgc.height), ("width", cgc.width)):
            if size % DOWNSAMPLE:
                raise ValueError(f"{axis} {size} is not divisible by {DOWNSAMPLE}; "
                                 f"the network needs both sides divisible by {DOWNSAMPLE} (use --naive)")
        model = load_checkpoint(args.model)
        l, hints = decode_to_inputs(cgc)
        img = reconstruct(as_predictor(model), l, hints.ab)
    _write_image(img, Path(args.out_image))
    return 0


def _train_config(args, n: int, out_dir) -> TrainConfig:
    try:
        return TrainConfig(n=n, epochs=args.epochs, lr=args.lr, batch_size=args.batch, crop=args.crop,
                           seed=args.seed, checkpoint_dir=str(out_dir))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args, args.n, args.out)
    manifest = build_manifest(args.data, test_count=args.test_count, seed=args.seed)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    manifest.save(Path(args.out) / "split.tsv")
    ckpt, reports = train(cfg, manifest)
    best = max(r.val_psnr for r in reports)
    print(f"canonical checkpoint {ckpt} (best validation PSNR {best:.3f} dB)")
    return 0


def _gather_images(paths: Sequence[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found += sorted(q for q in p.rglob("*") if q.is_file() and q.suffix in IMAGE_SUFFIXES)
        else:
            found.append(p)
    return found


def load_eval_images(paths: Sequence, crop: int | None) -> dict[str, Rgb8Image]:
    """Read (and optionally center-crop) evaluation images keyed by path; bad files are skipped."""
    images = {}
    for p in paths:
        try:
            img = read_image(p)
            images[str(p)] = center_crop(img, crop) if crop else img
        except SampleError as exc:
            log.warning("skipping %s: %s", p, exc)
    return images


def cmd_eval(args) -> int:
    images = load_eval_images(_gather_images(args.images), args.crop)
    if not images:
        raise UsageError("no readable evaluation images")
    for name, img in images.items():
        if img.height % DOWNSAMPLE or img.width % DOWNSAMPLE:
            raise UsageError(f"{name} is {img.width}x{img.height}; sides must be divisible by "
                             f"{DOWNSAMPLE} (pass --crop)")
    model = load_checkpoint(args.model)
    records, means = evaluate_model(as_predictor(model), images, GridSpec(args.n))
    write_eval_csv(records, args.out)
    print(f"n={args.n}: mean PSNR {means['psnr']:.3f} dB, mean CSIM {means['csim']:.4f}, "
          f"mean relative size {means['relative_size']:.6f} (bound {means['bound']:.6f})")
    return 0


# --- sweep ----------------------------------------------------------------

@dataclass
class SweepConfig:
    data: str
    output_dir: str
    n_values: list[int] = field(default_factory=lambda: list(DEFAULT_N_VALUES))
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 8
    crop: int = 320
    seed: int = 0
    test_count: int = 50
    eval_only: bool = False
    checkpoint_dir: str | None = None  # where --eval-only looks; defaults to output_dir
    plot: bool = False

    def __post_init__(self):
        if not self.n_values:
            raise ValueError("n_values must not be empty")
        if any(n < 1 for n in self.n_values):
            raise ValueError(f"every n must be >= 1, got {self.n_values}")

    def train_config(self, n: int) -> TrainConfig:
        return TrainConfig(n=n, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           crop=self.crop, seed=self.seed, checkpoint_dir=self.output_dir)


Predictor = Callable
PredictorFactory = Callable[[int], Predictor]


def write_summary_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r[k] for k in SUMMARY_HEADER])


def run_sweep(cfg: SweepConfig, predictor_for: PredictorFactory | None = None
              ) -> tuple[list[dict], dict[int, str]]:
    """Train (unless eval-only) and evaluate one model per n on the test split.

    ``predictor_for(n)`` overrides how the model for each n is obtained, which
    lets a stub stand in for trained checkpoints. Returns the summary rows and
    a map of n to failure message; a failing n does not stop the sweep.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg.data, test_count=cfg.test_count, seed=cfg.seed)
    manifest.save(out / "split.tsv")
    images = load_eval_images(manifest.test_paths, cfg.crop)
    if not images:
        raise RuntimeError("the test split has no readable images")

    def default_predictor(n: int):
        if cfg.eval_only:
            ckpt = Path(cfg.checkpoint_dir or cfg.output_dir) / checkpoint_name(n)
        else:
            ckpt, _ = train(cfg.train_config(n), manifest)
        return as_predictor(load_checkpoint(ckpt))

    factory = predictor_for or default_predictor
    rows, failures = [], {}
    for n in cfg.n_values:
        try:
            records, means = evaluate_model(factory(n), images, GridSpec(n))
        except Exception as exc:  # keep going; the caller reports the failures
            log.error("n=%d failed: %s", n, exc)
            failures[n] = f"{type(exc).__name__}: {exc}"
            continue
        write_eval_csv(records, out / f"eval_n{n}.csv")
        rows.append({"n": n, "mean_psnr": means["psnr"], "mean_csim": means["csim"],
                     "mean_relative_size": means["relative_size"], "bound": means["bound"]})
        log.info("n=%d: PSNR %.3f dB, CSIM %.4f", n, means["psnr"], means["csim"])
    write_summary_csv(rows, out / "summary.csv")
    if cfg.plot and rows:
        plot_summary(rows, out / "summary.svg")
    return rows, failures


def plot_summary(rows: Sequence[dict], path) -> None:
    """Three panels against n: PSNR, CSIM, and actual vs bound relative size."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "crayon"
    ns = [r["n"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(ns, [r["mean_psnr"] for r in rows], "o-")
    axes[0].set_ylabel("mean PSNR (dB)")
    axes[1].plot(ns, [r["mean_csim"] for r in rows], "o-")
    axes[1].set_ylabel("mean CSIM")
    axes[2].plot(ns, [r["mean_relative_size"] for r in rows], "o-", label="actual")
    axes[2].plot(ns, [r["bound"] for r in rows], "--", label="1/3 + 1/n^2")
    axes[2].set_ylabel("relative size")
    axes[2].legend()
    for ax in axes:
        ax.set_xlabel("grid spacing n")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_sweep(args) -> int:
    try:
        cfg = SweepConfig(data=args.data, output_dir=args.out, n_values=args.n_values, epochs=args.epochs,
                          lr=args.lr, batch_size=args.batch, crop=args.crop, seed=args.seed,
                          test_count=args.test_count, eval_only=args.eval_only,
                          checkpoint_dir=args.checkpoints, plot=args.plot)
        cfg.train_config(cfg.n_values[0])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows, failures = run_sweep(cfg)
    for n, msg in failures.items():
        print(f"n={n} failed: {msg}", file=sys.stderr)
    print(f"wrote {len(rows)} summary row(s) to {Path(args.out) / 'summary.csv'}")
    return 1 if failures else 0


# --- parser ---------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset root containing train/ and val/")
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--crop", type=_positive_int, default=320, help="square crop side, divisible by 8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-count", type=int, default=50, help="validation images moved to the test split")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crayon", description="Grayscale-plus-color-grid image codec.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress an image into a CGC file")
    p.add_argument("in_image")
    p.add_argument("out_cgc")
    p.add_argument("--n", type=_positive_int, required=True, help="grid spacing")
    p.add_argument("--phase", type=_phase, help="grid offset as row,col (each < n)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct an RGB image from a CGC file")
    p.add_argument("in_cgc")
    p.add_argument("out_image")
    how = p.add_mutually_exclusive_group(required=True)
    how.add_argument("--model", help="checkpoint to colorize with")
    how.add_argument("--naive", action="store_true", help="nearest-sample fill instead of the network")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train the canonical model for one n")
    p.add_argument("--n", type=_positive_int, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a set of images")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--images", nargs="+", required=True, help="image files or directories")
    p.add_argument("--crop", type=_positive_int, help="center-crop every image to this side first")
    p.add_argument("--out", required=True, help="per-image CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate across several n values")
    p.add_argument("--n-values", type=_n_list, default=list(DEFAULT_N_VALUES), help="comma-separated")
    _add_train_flags(p)
    p.add_argument("--eval-only", action="store_true", help="evaluate existing checkpoints")
    p.add_argument("--checkpoints", help="checkpoint directory for --eval-only (default: --out)")
    p.add_argument("--plot", action="store_true", help="also write summary.svg (needs matplotlib)")
    p.set_defaults(func=cmd_sweep)
    return parser


def _thread_limit():
    value = os.environ.get("CRAYON_THREADS")
    if not value:
        return None
    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f"CRAYON_THREADS must be an integer, got {value!r}") from None
    if limit < 1:
        raise UsageError(f"CRAYON_THREADS must be >= 1, got {limit}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except Exception as exc:
        print(f"crayon {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
