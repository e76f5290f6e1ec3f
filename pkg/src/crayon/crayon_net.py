"""The Crayon colorization network: a 4-stage U-Net followed by a residual stage.

The architecture is kept as a literal layer table (``CRAYON_TABLE``) with the
published input/output sizes and channel counts. :func:`build_crayon`
re-derives every size from the wiring and refuses to build if anything
disagrees with the declared columns, so an edit to the table that breaks the
plumbing fails at construction time with the offending layer index.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn_core as nn
from .nn_core import ConvSpec, DimensionError, Parameter, Tensor

__all__ = [
    "CrayonBuildError",
    "CheckpointError",
    "LayerSpec",
    "CrayonModel",
    "CRAYON_TABLE",
    "PUBLISHED_ERRATA",
    "build_crayon",
    "OUTPUT_GAIN",
    "param_shapes",
    "as_predictor",
    "audit_shapes",
    "save_checkpoint",
    "load_checkpoint",
]

SEQUENCE, CONCAT, ADD = "sequence", "channel-concat", "elementwise-add"
OP_KINDS = ("input", "conv", "relu", "maxpool", "transposed_conv", "concat", "add")
_COMBINE = {"concat": CONCAT, "add": ADD}
DOWNSAMPLE = 8  # three 2x2 max-pools


class CrayonBuildError(ValueError):
    """The layer table is internally inconsistent."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or from another format version."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    op_kind: str
    data_from: tuple[int, ...]
    x_in: int | None  # declared spatial size at 320x320
    x_out: int
    c_in: int | None
    c_out: int
    conv_spec: ConvSpec | None = None
    pool: tuple[int, int] | None = None

    @property
    def combine(self) -> str:
        if len(self.data_from) > 1 and self.op_kind == "conv":
            return CONCAT
        return _COMBINE.get(self.op_kind, SEQUENCE)


def _conv(i, src, x, ci, co, k=3, s=1, p=1, d=1):
    return LayerSpec(i, "conv", (src,), x, x, ci, co, ConvSpec(ci, co, k, s, p, d))


def _relu(i, src, x, c):
    return LayerSpec(i, "relu", (src,), x, x, c, c)


def _pool(i, src, x, c):
    return LayerSpec(i, "maxpool", (src,), x, x // 2, c, c, pool=(2, 2))


def _up(i, src, x, ci, co):
    return LayerSpec(i, "transposed_conv", (src,), x, 2 * x, ci, co, ConvSpec(ci, co, 2, 2, 0, 1))


def _cat(i, srcs, x, ci, co):
    return LayerSpec(i, "concat", tuple(srcs), x, x, ci, co)


def _add(i, srcs, x, c):
    return LayerSpec(i, "add", tuple(srcs), x, x, c, c)


def _encoder_stage(first, src, x, ci, co):
    return [
        _conv(first, src, x, ci, co), _relu(first + 1, first, x, co),
        _conv(first + 2, first + 1, x, co, co), _relu(first + 3, first + 2, x, co),
    ]


def _residual_block(first, src, c=64, x=320):
    # conv-relu-conv-relu, then add the block input to the second relu output
    return [
        _conv(first, src, x, c, c), _relu(first + 1, first, x, c),
        _conv(first + 2, first + 1, x, c, c), _relu(first + 3, first + 2, x, c),
        _add(first + 4, (src, first + 3), x, c),
    ]


def _table() -> list[LayerSpec]:
    t = [
        LayerSpec(0, "input", (), None, 320, None, 1),
        LayerSpec(1, "input", (), None, 320, None, 2),
        LayerSpec(2, "conv", (0, 1), 320, 320, 3, 64, ConvSpec(3, 64, 3, 1, 1, 1)),
    ]
    t += [_relu(3, 2, 320, 64), _conv(4, 3, 320, 64, 64), _relu(5, 4, 320, 64), _pool(6, 5, 320, 64)]
    t += _encoder_stage(7, 6, 160, 64, 128) + [_pool(11, 10, 160, 128)]
    t += _encoder_stage(12, 11, 80, 128, 256) + [_pool(16, 15, 80, 256)]
    t += _encoder_stage(17, 16, 40, 256, 512)
    for i in range(21, 33, 2):  # dilated block
        t += [_conv(i, i - 1, 40, 512, 512, p=2, d=2), _relu(i + 1, i, 40, 512)]
    t += [_conv(33, 32, 40, 512, 512), _relu(34, 33, 40, 512)]
    t += [_up(35, 34, 40, 512, 256), _relu(36, 35, 80, 256), _cat(37, (15, 36), 80, 512, 512),
          _conv(38, 37, 80, 512, 256), _relu(39, 38, 80, 256)]
    t += [_up(40, 39, 80, 256, 128), _relu(41, 40, 160, 128), _cat(42, (10, 41), 160, 256, 256),
          _conv(43, 42, 160, 256, 128), _relu(44, 43, 160, 128)]
    t += [_up(45, 44, 160, 128, 128), _relu(46, 45, 320, 128), _cat(47, (5, 46), 320, 192, 192),
          _conv(48, 47, 320, 192, 128), _relu(49, 48, 320, 128),
          _conv(50, 49, 320, 128, 2, k=1, p=0)]
    # Part 2: residual network
    t += [_cat(51, (0, 1, 50), 320, 5, 5),
          _conv(52, 51, 320, 5, 64), _relu(53, 52, 320, 64), _conv(54, 53, 320, 64, 64),
          _relu(55, 54, 320, 64),
          _conv(56, 55, 320, 64, 64), _relu(57, 56, 320, 64), _conv(58, 57, 320, 64, 64),
          _relu(59, 58, 320, 64), _add(60, (54, 59), 320, 64)]
    t += _residual_block(61, 60) + _residual_block(66, 65) + _residual_block(71, 70)
    t += [_conv(76, 75, 320, 64, 256), _relu(77, 76, 320, 256), _conv(78, 77, 320, 256, 2),
          _cat(79, (0, 78), 320, 3, 3)]
    return t


CRAYON_TABLE: tuple[LayerSpec, ...] = tuple(_table())

# Values printed in the published tables that contradict their neighbours;
# CRAYON_TABLE carries the corrected widths.
PUBLISHED_ERRATA = {
    51: {"c_out": 3},  # inputs sum to 1+2+2 and row 52 consumes 5
    77: {"c_in": 64, "c_out": 64},  # ReLU between a 256-wide producer and consumer
}


def audit_shapes(layers: Sequence[LayerSpec], height: int = 320, width: int = 320,
                 check_declared: bool | None = None) -> list[tuple[int, int, int]]:
    """Propagate (C, H, W) through the table, raising on any inconsistency.

    Declared X/C columns are compared whenever the input is 320x320 (the size
    the table was written for) unless ``check_declared`` says otherwise.
    """
    if check_declared is None:
        check_declared = height == 320 and width == 320
    shapes: list[tuple[int, int, int]] = []

    def fail(idx, msg):
        raise CrayonBuildError(f"layer {idx}: {msg}")

    for pos, layer in enumerate(layers):
        i = layer.index
        if i != pos:
            fail(i, f"listed at position {pos}")
        if layer.op_kind not in OP_KINDS:
            fail(i, f"unknown op kind {layer.op_kind!r}")
        for src in layer.data_from:
            if not 0 <= src < i:
                fail(i, f"reads from layer {src}, which is not an earlier layer")
        srcs = [shapes[s] for s in layer.data_from]

        if layer.op_kind == "input":
            if srcs:
                fail(i, "input layers take no sources")
            shape = (layer.c_out, height, width)
            shapes.append(shape)
            if check_declared and layer.x_out != height:
                fail(i, f"declared X_o {layer.x_out} but input is {height}")
            continue

        if not srcs:
            fail(i, "has no sources")
        if layer.op_kind in ("concat", "add"):
            if len(srcs) < 2:
                fail(i, f"{layer.op_kind} needs at least two sources")
            if len({s[1:] for s in srcs}) != 1:
                fail(i, f"sources {layer.data_from} disagree spatially: {[s[1:] for s in srcs]}")
            if layer.op_kind == "add" and len({s[0] for s in srcs}) != 1:
                fail(i, f"added sources {layer.data_from} have channels {[s[0] for s in srcs]}")
            c_in = sum(s[0] for s in srcs) if layer.op_kind == "concat" else srcs[0][0]
        else:
            if len(layer.data_from) != 1 and layer.op_kind != "conv":
                fail(i, f"{layer.op_kind} takes a single source")
            if layer.op_kind == "conv" and len(srcs) > 1:
                # implicit concatenation of raw inputs (row 2 reads [0, 1])
                if len({s[1:] for s in srcs}) != 1:
                    fail(i, "concatenated conv sources disagree spatially")
                c_in = sum(s[0] for s in srcs)
            else:
                c_in = srcs[0][0]
        _, h, w = srcs[0]

        if layer.c_in is not None and c_in != layer.c_in:
            fail(i, f"sources provide {c_in} channels but C_i is declared {layer.c_in}")
        if check_declared and layer.x_in is not None and h != layer.x_in:
            fail(i, f"input spatial size {h} but X_i is declared {layer.x_in}")

        if layer.op_kind in ("conv", "transposed_conv"):
            cs = layer.conv_spec
            if cs is None:
                fail(i, "missing conv spec")
            if cs.in_channels != c_in:
                fail(i, f"conv spec expects {cs.in_channels} input channels, sources give {c_in}")
            size = nn.conv_output_size if layer.op_kind == "conv" else nn.transposed_conv_output_size
            ho = size(h, cs.kernel, cs.stride, cs.padding, cs.dilation)
            wo = size(w, cs.kernel, cs.stride, cs.padding, cs.dilation)
            c_out = cs.out_channels
        elif layer.op_kind == "maxpool":
            k, s = layer.pool
            if h % s or w % s:
                fail(i, f"max-pool input {h}x{w} not divisible by {s}")
            ho, wo, c_out = (h - k) // s + 1, (w - k) // s + 1, c_in
        else:
            ho, wo, c_out = h, w, c_in

        if c_out != layer.c_out:
            fail(i, f"produces {c_out} channels but C_o is declared {layer.c_out}")
        if ho < 1 or wo < 1:
            fail(i, f"output collapses to {ho}x{wo}")
        if check_declared and ho != layer.x_out:
            fail(i, f"output spatial size {ho} but X_o is declared {layer.x_out}")
        shapes.append((c_out, ho, wo))
    return shapes


class CrayonModel:
    """Layer table plus one weight/bias pair per (transposed) convolution."""

    def __init__(self, layers: Sequence[LayerSpec], params: dict[int, tuple[Parameter, Parameter]]):
        self.layers = tuple(layers)
        self.params = params
        last = {}
        for layer in self.layers:
            for s in layer.data_from:
                last[s] = layer.index
        self._last_use = last

    def parameters(self) -> list[Parameter]:
        return [p for idx in sorted(self.params) for p in self.params[idx]]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, l, ab_hints, trace: list | None = None) -> Tensor:
        return self.forward(l, ab_hints, trace=trace)

    def forward(self, l, ab_hints, trace: list | None = None) -> Tensor:
        """Run layers 0..79. ``l`` is (N,1,H,W), ``ab_hints`` is (N,2,H,W).

        Returns (N,3,H,W): the untouched L input followed by predicted a, b.
        If ``trace`` is a list, (index, shape) for every layer is appended.
        """
        l = l if isinstance(l, Tensor) else Tensor(l)
        ab = ab_hints if isinstance(ab_hints, Tensor) else Tensor(ab_hints)
        if l.data.ndim != 4 or l.shape[1] != 1:
            raise DimensionError(f"L input must be (N,1,H,W), got {l.shape}")
        if ab.data.ndim != 4 or ab.shape[1] != 2:
            raise DimensionError(f"AB input must be (N,2,H,W), got {ab.shape}")
        if ab.shape[0] != l.shape[0] or ab.shape[2:] != l.shape[2:]:
            raise DimensionError(f"L {l.shape} and AB {ab.shape} inputs disagree")
        h, w = l.shape[2:]
        if h % DOWNSAMPLE:
            raise DimensionError(f"height axis {h} is not divisible by {DOWNSAMPLE}")
        if w % DOWNSAMPLE:
            raise DimensionError(f"width axis {w} is not divisible by {DOWNSAMPLE}")

        outs: dict[int, Tensor] = {0: l, 1: ab}
        recording = nn._GRAD_ENABLED
        for layer in self.layers[2:]:
            srcs = [outs[s] for s in layer.data_from]
            kind = layer.op_kind
            if kind in ("conv", "transposed_conv"):
                x = srcs[0] if len(srcs) == 1 else nn.concat_channels(srcs)
                wgt, bias = self.params[layer.index]
                op = nn.conv2d if kind == "conv" else nn.transposed_conv2d
                y = op(x, wgt, bias, layer.conv_spec)
            elif kind == "relu":
                y = nn.relu(srcs[0])
            elif kind == "maxpool":
                y = nn.maxpool2d(srcs[0], *layer.pool)
            elif kind == "concat":
                y = nn.concat_channels(srcs)
            elif kind == "add":
                y = srcs[0]
                for other in srcs[1:]:
                    y = nn.add_elementwise(y, other)
            else:
                raise CrayonBuildError(f"layer {layer.index}: cannot execute {kind!r}")
            outs[layer.index] = y
            if trace is not None:
                trace.append((layer.index, y.shape))
            if not recording:
                for s in layer.data_from:
                    if self._last_use.get(s) == layer.index and s > 1:
                        del outs[s]
        return outs[self.layers[-1].index]

    def predict(self, l: np.ndarray, ab_hints: np.ndarray) -> np.ndarray:
        with nn.no_grad():
            return self.forward(l, ab_hints).data


def param_shapes(layers: Sequence[LayerSpec]) -> dict[int, tuple[tuple[int, ...], tuple[int]]]:
    """Weight and bias shape for every parameterized layer."""
    shapes = {}
    for layer in layers:
        cs = layer.conv_spec
        if layer.op_kind == "conv":
            w = (cs.out_channels, cs.in_channels, cs.kernel, cs.kernel)
        elif layer.op_kind == "transposed_conv":
            w = (cs.in_channels, cs.out_channels, cs.kernel, cs.kernel)
        else:
            continue
        shapes[layer.index] = (w, (cs.out_channels,))
    return shapes


# The last convolution writes a, b directly. At full Kaiming scale the
# untrained network emits chroma with std ~1.2 (far outside [-1, 1]) and most
# of the early optimisation is spent shrinking it; starting that layer 100x
# smaller keeps the output near neutral while leaving every path live.
OUTPUT_GAIN = 0.01


def _init_params(layers: Sequence[LayerSpec], seed: int, output_gain: float = OUTPUT_GAIN
                 ) -> dict[int, tuple[Parameter, Parameter]]:
    # Kaiming-normal with ReLU gain; a stride-2 2x2 transposed conv feeds each
    # output pixel from one tap, so its fan-in is C_in * K^2 / S^2.
    rng = np.random.default_rng(seed)
    by_index = {layer.index: layer for layer in layers}
    shapes = param_shapes(layers)
    last = max(shapes) if shapes else None
    params = {}
    for idx, (wshape, bshape) in shapes.items():
        cs = by_index[idx].conv_spec
        fan_in = cs.in_channels * cs.kernel**2
        if by_index[idx].op_kind == "transposed_conv":
            fan_in = max(1.0, fan_in / cs.stride**2)
        std = np.sqrt(2.0 / fan_in) * (output_gain if idx == last else 1.0)
        w = (rng.standard_normal(wshape) * std).astype(np.float32)
        params[idx] = (
            Parameter(w, name=f"layer{idx}.weight"),
            Parameter(np.zeros(bshape, np.float32), name=f"layer{idx}.bias"),
        )
    return params


def build_crayon(seed: int = 0, layers: Sequence[LayerSpec] = CRAYON_TABLE,
                 output_gain: float = OUTPUT_GAIN) -> CrayonModel:
    """Audit ``layers`` and initialise weights from ``seed``.

    ``output_gain`` scales the init of the final (chroma-producing) convolution;
    1.0 gives plain Kaiming init throughout.
    """
    audit_shapes(layers, 320, 320)
    return CrayonModel(layers, _init_params(layers, seed, output_gain))


# --- checkpoints ---------------------------------------------------------
#
# "CRYN" | u16 version | u32 layer count | u32 parameterized layer count
# then per parameterized layer: u16 index, then weight and bias records,
# each u32 rank, u32 dims..., float32 LE data.

CKPT_MAGIC = b"CRYN"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHII")


def _pack_array(a: np.ndarray) -> bytes:
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(model: CrayonModel, path) -> int:
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(model.layers), len(model.params))]
    for idx in sorted(model.params):
        w, b = model.params[idx]
        parts += [struct.pack("<H", idx), _pack_array(w.data), _pack_array(b.data)]
    blob = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def array(self) -> np.ndarray:
        (rank,) = self.take("<I")
        if rank > 8:
            raise CheckpointError(f"implausible tensor rank {rank} at byte {self.pos - 4}")
        dims = self.take(f"<{rank}I")
        count = int(np.prod(dims)) if dims else 1
        nbytes = 4 * count
        if self.pos + nbytes > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        arr = np.frombuffer(self.raw, dtype="<f4", count=count, offset=self.pos).reshape(dims)
        self.pos += nbytes
        return arr.astype(np.float32)


def load_checkpoint(path, layers: Sequence[LayerSpec] = CRAYON_TABLE) -> CrayonModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw)
    magic, version, n_layers, n_param = rd.take(_CKPT_HEAD.format)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    audit_shapes(layers, 320, 320)
    if n_layers != len(layers):
        raise CheckpointError(f"checkpoint describes {n_layers} layers, table has {len(layers)}")
    template = param_shapes(layers)
    if n_param != len(template):
        raise CheckpointError(f"checkpoint has {n_param} parameterized layers, expected {len(template)}")
    loaded = {}
    for _ in range(n_param):
        (idx,) = rd.take("<H")
        if idx not in template or idx in loaded:
            raise CheckpointError(f"unexpected parameterized layer index {idx}")
        w, b = rd.array(), rd.array()
        tw, tb = template[idx]
        if w.shape != tw or b.shape != tb:
            raise CheckpointError(f"layer {idx}: stored shapes {w.shape}/{b.shape}, expected {tw}/{tb}")
        loaded[idx] = (Parameter(w, name=f"layer{idx}.weight"), Parameter(b, name=f"layer{idx}.bias"))
    if rd.pos != len(raw):
        raise CheckpointError(f"{len(raw) - rd.pos} trailing bytes after last record")
    return CrayonModel(layers, loaded)


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def as_predictor(model) -> Predictor:
    """Wrap a CrayonModel (or any ``(l, ab) -> (N,3,H,W)`` callable) for inference."""
    if isinstance(model, CrayonModel):
        return model.predict
    return lambda l, ab: np.asarray(model(l, ab))
