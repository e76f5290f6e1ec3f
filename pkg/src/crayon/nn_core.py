"""Minimal reverse-mode autodiff over numpy arrays.

Only the primitives the Crayon network needs are provided: dilated 2-D
convolution, transposed convolution, max-pooling, ReLU, channel
concatenation and slicing, elementwise addition and the MSE loss. Arrays are
channels-first (N, C, H, W). Everything is float32 unless a caller
explicitly builds float64 tensors (the gradient checks do this).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError",
    "GraphError",
    "NumericError",
    "Tensor",
    "Parameter",
    "ConvSpec",
    "conv2d",
    "transposed_conv2d",
    "conv_output_size",
    "transposed_conv_output_size",
    "maxpool2d",
    "relu",
    "concat_channels",
    "slice_channels",
    "add_elementwise",
    "mse_loss",
    "backward",
    "adam_step",
    "Adam",
    "no_grad",
]


class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class GraphError(RuntimeError):
    """Raised when backward is asked to traverse an invalid graph."""


class NumericError(ArithmeticError):
    """Raised on non-finite gradients or losses."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An array plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor shape {arr.shape} has an empty axis")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


class Parameter(Tensor):
    """Trainable tensor carrying its own ADAM moment estimates."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None, dtype=np.float32):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=None)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=None)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec.{field} must be >= 1, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be >= 0, got {self.padding}")


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def transposed_conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                                dilation: int = 1) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1


def _check_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {x.shape}")


# --- im2col helpers -------------------------------------------------------
#
# Columns are laid out as (C, K, K, N, Ho, Wo) so that a single GEMM against
# a (Co, C*K*K) weight matrix produces (Co, N*Ho*Wo).

def _im2col(xp: np.ndarray, k: int, s: int, d: int, ho: int, wo: int) -> np.ndarray:
    span = d * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, ::d, ::d]
    # win: (N, C, Ho, Wo, K, K) -> (C, K, K, N, Ho, Wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(xp.shape[1] * k * k, -1)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int, d: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * d, j * d
            out[:, :, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv2d(x, w, b, spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x`` (N,Ci,H,W) with ``w`` (Co,Ci,K,K) plus bias."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_rank(x.data, 4, "conv2d input")
    k, s, p, d = spec.kernel, spec.stride, spec.padding, spec.dilation
    n, ci, h, wd = x.shape
    if ci != spec.in_channels:
        raise DimensionError(f"conv2d input channel axis is {ci}, spec expects {spec.in_channels}")
    if w.shape != (spec.out_channels, spec.in_channels, k, k):
        raise DimensionError(
            f"conv2d weight shape {w.shape} != {(spec.out_channels, spec.in_channels, k, k)}")
    if b.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({spec.out_channels},)")
    ho = conv_output_size(h, k, s, p, d)
    wo = conv_output_size(wd, k, s, p, d)
    if ho < 1:
        raise DimensionError(f"conv2d height axis {h} too small for kernel span")
    if wo < 1:
        raise DimensionError(f"conv2d width axis {wd} too small for kernel span")
    co = spec.out_channels

    xp = _pad(x.data, p)
    wmat = w.data.reshape(co, -1)
    out = wmat @ _im2col(xp, k, s, d, ho, wo)
    out += b.data[:, None]
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)

    def _backward(g: np.ndarray) -> None:
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if w.requires_grad:
            cols = _im2col(xp, k, s, d, ho, wo)
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = wmat.T @ g2
            x._accumulate(_unpad(_col2im(dcols, xp.shape, k, s, d, ho, wo), p))

    return _make(out, (x, w, b), _backward)


def transposed_conv2d(x, w, b, spec: ConvSpec) -> Tensor:
    """Fractionally strided convolution; ``w`` has shape (Ci, Co, K, K)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _check_rank(x.data, 4, "transposed_conv2d input")
    k, s, p, d = spec.kernel, spec.stride, spec.padding, spec.dilation
    n, ci, h, wd = x.shape
    if ci != spec.in_channels:
        raise DimensionError(
            f"transposed_conv2d input channel axis is {ci}, spec expects {spec.in_channels}")
    if w.shape != (spec.in_channels, spec.out_channels, k, k):
        raise DimensionError(
            f"transposed_conv2d weight shape {w.shape} != {(spec.in_channels, spec.out_channels, k, k)}")
    if b.shape != (spec.out_channels,):
        raise DimensionError(f"transposed_conv2d bias shape {b.shape} != ({spec.out_channels},)")
    co = spec.out_channels
    ho = transposed_conv_output_size(h, k, s, p, d)
    wo = transposed_conv_output_size(wd, k, s, p, d)
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed_conv2d padding {p} removes the whole output")
    full = (n, co, ho + 2 * p, wo + 2 * p)

    wmat = w.data.reshape(ci, -1)  # (Ci, Co*K*K)
    x2 = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    out = _unpad(_col2im(wmat.T @ x2, full, k, s, d, h, wd), p)
    out = out + b.data[None, :, None, None]

    def _backward(g: np.ndarray) -> None:
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if not (w.requires_grad or x.requires_grad):
            return
        cols = _im2col(_pad(g, p), k, s, d, h, wd)  # (Co*K*K, N*H*W)
        if w.requires_grad:
            w._accumulate((x2 @ cols.T).reshape(w.shape))
        if x.requires_grad:
            x._accumulate((wmat @ cols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3))

    return _make(out, (x, w, b), _backward)


def maxpool2d(x, k: int, s: int) -> Tensor:
    """Window maximum. Ties send the gradient to the first row-major maximum."""
    x = _as_tensor(x)
    _check_rank(x.data, 4, "maxpool2d input")
    n, c, h, wd = x.shape
    if k == s:
        if h % s:
            raise DimensionError(f"maxpool2d height axis {h} not divisible by stride {s}")
        if wd % s:
            raise DimensionError(f"maxpool2d width axis {wd} not divisible by stride {s}")
    ho, wo = (h - k) // s + 1, (wd - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d input {h}x{wd} smaller than window {k}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        rows = (np.arange(ho) * s)[None, None, :, None] + idx // k
        cols = (np.arange(wo) * s)[None, None, None, :] + idx % k
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn_, cc, rows, cols), g)
        x._accumulate(dx)

    return _make(out, (x,), _backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def _backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _make(out, (x,), _backward)


def concat_channels(xs: Sequence) -> Tensor:
    """Stack tensors along axis 1 in argument order."""
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if t.data.ndim != len(ref) or len(ref) < 2:
            raise DimensionError(f"concat_channels operand {i} has rank {t.data.ndim}, expected {len(ref)}")
        for axis, (a, r) in enumerate(zip(t.shape, ref)):
            if axis != 1 and a != r:
                raise DimensionError(
                    f"concat_channels operand {i} disagrees on axis {axis}: {a} != {r}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _make(out, xs, _backward)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for {c} channels")
    out = x.data[:, start:stop]

    def _backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        x._accumulate(dx)

    return _make(out, (x,), _backward)


def add_elementwise(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        for axis, (p, q) in enumerate(zip(a.shape, b.shape)):
            if p != q:
                raise DimensionError(f"add_elementwise operands disagree on axis {axis}: {p} != {q}")
        raise DimensionError(f"add_elementwise rank mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def _backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out, (a, b), _backward)


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred = _as_tensor(pred)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_data.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target_data.shape}")
    diff = pred.data - target_data.astype(pred.dtype, copy=False)
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def _backward(g: np.ndarray) -> None:
        pred._accumulate(g * (2.0 / diff.size) * diff)

    return _make(out, (pred,), _backward)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if state.get(id(node)) == 2:
                continue
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphError(f"cycle detected through {parent!r}")
            if mark is None:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> list[Tensor]:
    """Propagate gradients from ``loss`` back to every leaf requiring them.

    Returns the leaves (usually parameters) that received a gradient.
    Intermediate gradients and graph references are released afterwards.
    """
    if not isinstance(loss, Tensor):
        raise GraphError(f"backward expects a Tensor, got {type(loss).__name__}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor that was not recorded in a graph")
    if grad is None:
        if loss.data.size != 1:
            raise GraphError(f"implicit seed gradient needs a scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    elif np.shape(grad) != loss.shape:
        raise DimensionError(f"seed gradient shape {np.shape(grad)} != {loss.shape}")

    order = _topological_order(loss)
    loss._accumulate(np.asarray(grad, dtype=loss.dtype))
    leaves = []
    for node in reversed(order):
        if node._backward is None:
            if node.requires_grad and node.grad is not None:
                leaves.append(node)
            continue
        if node.grad is not None:
            node._backward(node.grad)
        node.grad = None
        node._backward = None
        node._parents = ()
    return leaves


def adam_step(p: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Parameter:
    """One bias-corrected ADAM update of ``p`` in place. Missing grads count as zero."""
    g = p.grad if p.grad is not None else np.zeros_like(p.data)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    denom = np.sqrt(p.adam_v / p.data.dtype.type(bc2)) + p.data.dtype.type(eps)
    p.data -= p.data.dtype.type(lr / bc1) * p.adam_m / denom
    return p


class Adam:
    """Applies :func:`adam_step` to a fixed parameter list."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0 or math.isnan(lr):
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)
