"""Check the hand-written backward passes against finite differences.

Each primitive is run in float64 on a tiny random input; the analytic
gradient of a random projection of its output is compared with central
differences.
"""
import numpy as np

from crayon import nn_core as nn
from crayon.nn_core import ConvSpec

rng = np.random.default_rng(0)
eps = 1e-3


def numeric(f, x):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(name, op, *arrays):
    arrays = [np.asarray(a, np.float64) for a in arrays]
    proj = rng.standard_normal(op(*[nn.Tensor(a, dtype=None) for a in arrays]).shape)
    ts = [nn.Tensor(a, requires_grad=True, dtype=None) for a in arrays]
    nn.backward(op(*ts), proj)
    f = lambda: float(np.sum(op(*[nn.Tensor(a, dtype=None) for a in arrays]).data * proj))  # noqa: E731
    errs = []
    for t, a in zip(ts, arrays):
        num = numeric(f, a)
        errs.append(np.linalg.norm(t.grad - num) / max(np.linalg.norm(num), 1e-12))
    print(f"{name:<28}" + "  ".join(f"{e:.1e}" for e in errs))


dil = ConvSpec(2, 3, 3, stride=1, padding=2, dilation=2)
check("conv2d dilated", lambda x, w, b: nn.conv2d(x, w, b, dil),
      rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
up = ConvSpec(2, 2, 2, stride=2)
check("transposed_conv2d 2x up", lambda x, w, b: nn.transposed_conv2d(x, w, b, up),
      rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((2, 2, 2, 2)), rng.standard_normal(2))
check("maxpool2d", lambda x: nn.maxpool2d(x, 2, 2), rng.permutation(16).reshape(1, 1, 4, 4) * 0.1)
check("relu", nn.relu, rng.standard_normal((2, 5)) + 0.1)
target = rng.standard_normal((2, 3))
check("mse_loss", lambda p: nn.mse_loss(p, target), rng.standard_normal((2, 3)))
