import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crayon import nn_core as nn
from crayon.nn_core import ConvSpec, DimensionError, GraphError, NumericError, Parameter, Tensor

from gradcheck import RTOL, check

# (N, Ci, Co, H, W, K, S, P, D)
CONV_CASES = [
    (1, 1, 1, 4, 4, 3, 1, 1, 1),
    (2, 2, 3, 4, 3, 3, 1, 1, 1),
    (1, 3, 2, 4, 4, 3, 1, 2, 2),
    (2, 2, 2, 4, 4, 2, 2, 0, 1),
    (1, 2, 1, 3, 4, 1, 1, 0, 1),
    (1, 1, 2, 4, 4, 3, 2, 1, 1),
]

TCONV_CASES = [
    (1, 1, 1, 2, 2, 2, 2, 0, 1),
    (2, 2, 3, 2, 3, 2, 2, 0, 1),
    (1, 3, 2, 3, 3, 3, 1, 1, 1),
    (1, 2, 2, 2, 2, 3, 2, 1, 1),
    (2, 1, 2, 3, 2, 2, 1, 0, 2),
]


def test_conv_hand_counted():
    x = np.ones((1, 1, 3, 3), np.float32)
    w = np.ones((1, 1, 3, 3), np.float32)
    y = nn.conv2d(x, w, np.zeros(1, np.float32), ConvSpec(1, 1, 3, 1, 1, 1))
    assert y.data[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def brute_conv(x, w, b, s, p, d):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (wd + 2 * p - d * (k - 1) - 1) // s + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for r in range(ho):
                for c in range(wo):
                    acc = b[o]
                    for i in range(ci):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, i, u, v] * xp[a, i, r * s + u * d, c * s + v * d]
                    out[a, o, r, c] = acc
    return out


def brute_tconv(x, w, b, s, p, d):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    full_h = (h - 1) * s + d * (k - 1) + 1
    full_w = (wd - 1) * s + d * (k - 1) + 1
    out = np.zeros((n, co, full_h, full_w))
    for a in range(n):
        for i in range(ci):
            for r in range(h):
                for c in range(wd):
                    for o in range(co):
                        for u in range(k):
                            for v in range(k):
                                out[a, o, r * s + u * d, c * s + v * d] += x[a, i, r, c] * w[i, o, u, v]
    out = out[:, :, p : full_h - p, p : full_w - p]
    return out + b[None, :, None, None]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_matches_brute_force(rng, case):
    n, ci, co, h, w, k, s, p, d = case
    x, wt, b = rng.standard_normal((n, ci, h, w)), rng.standard_normal((co, ci, k, k)), rng.standard_normal(co)
    y = nn.conv2d(Tensor(x, dtype=None), Tensor(wt, dtype=None), Tensor(b, dtype=None),
                  ConvSpec(ci, co, k, s, p, d))
    np.testing.assert_allclose(y.data, brute_conv(x, wt, b, s, p, d), atol=1e-10)


@pytest.mark.parametrize("case", TCONV_CASES)
def test_transposed_conv_matches_brute_force(rng, case):
    n, ci, co, h, w, k, s, p, d = case
    x, wt, b = rng.standard_normal((n, ci, h, w)), rng.standard_normal((ci, co, k, k)), rng.standard_normal(co)
    y = nn.transposed_conv2d(Tensor(x, dtype=None), Tensor(wt, dtype=None), Tensor(b, dtype=None),
                             ConvSpec(ci, co, k, s, p, d))
    np.testing.assert_allclose(y.data, brute_tconv(x, wt, b, s, p, d), atol=1e-10)


def test_transposed_conv_single_tap():
    v, kernel, bias = 3.0, np.array([[1.0, 2.0], [3.0, 4.0]]), 0.5
    y = nn.transposed_conv2d(np.full((1, 1, 1, 1), v, np.float32), kernel.reshape(1, 1, 2, 2).astype(np.float32),
                             np.array([bias], np.float32), ConvSpec(1, 1, 2, 2, 0, 1))
    assert y.data[0, 0].tolist() == (v * kernel + bias).tolist()


@pytest.mark.parametrize("xi,k,s,p,d,xo", [(320, 3, 1, 1, 1, 320), (40, 3, 1, 2, 2, 40), (7, 3, 2, 1, 1, 4)])
def test_conv_output_size(xi, k, s, p, d, xo):
    assert nn.conv_output_size(xi, k, s, p, d) == xo


@pytest.mark.parametrize("xi,xo", [(40, 80), (80, 160), (160, 320)])
def test_transposed_output_size(xi, xo):
    assert nn.transposed_conv_output_size(xi, 2, 2, 0, 1) == xo


def test_transposed_conv_table_row_45_shape():
    x = np.zeros((1, 128, 16, 16), np.float32)
    w = np.zeros((128, 128, 2, 2), np.float32)
    y = nn.transposed_conv2d(x, w, np.zeros(128, np.float32), ConvSpec(128, 128, 2, 2))
    assert y.shape == (1, 128, 32, 32)


def test_conv_shape_errors_name_axis():
    spec = ConvSpec(2, 3, 3, 1, 1, 1)
    with pytest.raises(DimensionError, match="channel"):
        nn.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3), spec)
    with pytest.raises(DimensionError, match="weight"):
        nn.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 2, 2, 2)), np.zeros(3), spec)
    with pytest.raises(DimensionError, match="bias"):
        nn.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(2), spec)
    with pytest.raises(DimensionError, match="height"):
        nn.conv2d(np.zeros((1, 2, 1, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3), ConvSpec(2, 3, 3, 1, 0, 1))
    with pytest.raises(DimensionError, match="rank"):
        nn.conv2d(np.zeros((2, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3), spec)
    with pytest.raises(DimensionError, match="channel"):
        nn.transposed_conv2d(np.zeros((1, 1, 4, 4)), np.zeros((2, 3, 2, 2)), np.zeros(3), ConvSpec(2, 3, 2, 2))


def test_convspec_validation():
    with pytest.raises(ValueError):
        ConvSpec(0, 1, 3)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, 3, padding=-1)


def test_conv_linearity(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    zero = np.zeros(4, np.float32)
    spec = ConvSpec(3, 4, 3, 1, 2, 2)
    a = np.float32(2.5)
    np.testing.assert_allclose(nn.conv2d(a * x, w, zero, spec).data, a * nn.conv2d(x, w, zero, spec).data,
                               rtol=1e-5, atol=1e-5)


def test_maxpool_basic():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert nn.maxpool2d(x, 2, 2).data.tolist() == [[[[4.0]]]]
    c = np.full((1, 2, 8, 8), 0.7, np.float32)
    y = nn.maxpool2d(c, 2, 2)
    assert y.shape == (1, 2, 4, 4) and np.all(y.data == np.float32(0.7))
    assert nn.maxpool2d(np.zeros((1, 1, 320, 320), np.float32), 2, 2).shape == (1, 1, 160, 160)
    with pytest.raises(DimensionError, match="height"):
        nn.maxpool2d(np.zeros((1, 1, 5, 4), np.float32), 2, 2)


def test_maxpool_ties_route_gradient_to_first():
    x = Tensor(np.ones((1, 1, 2, 2), np.float32), requires_grad=True)
    nn.backward(nn.maxpool2d(x, 2, 2), np.ones((1, 1, 1, 1), np.float32))
    assert x.grad[0, 0].tolist() == [[1, 0], [0, 0]]


def test_relu_concat_add():
    assert nn.relu(np.array([-1.0, 0.0, 2.0], np.float32)).data.tolist() == [0, 0, 2]
    a = np.zeros((1, 256, 2, 2), np.float32)
    assert nn.concat_channels([a, a]).shape == (1, 512, 2, 2)
    b = np.ones((1, 64, 2, 2), np.float32)
    assert nn.add_elementwise(b, b).shape == (1, 64, 2, 2)
    with pytest.raises(DimensionError, match="axis 2"):
        nn.concat_channels([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2))])
    with pytest.raises(DimensionError, match="axis 1"):
        nn.add_elementwise(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 2, 2)))


def test_concat_order():
    a = np.zeros((1, 1, 1, 1), np.float32)
    b = np.ones((1, 2, 1, 1), np.float32)
    assert nn.concat_channels([a, b]).data.ravel().tolist() == [0, 1, 1]
    assert nn.concat_channels([b, a]).data.ravel().tolist() == [1, 1, 0]


def test_relu_gradient_at_zero_and_negative():
    x = Tensor(np.array([-2.0, 0.0, 3.0], np.float32), requires_grad=True)
    nn.backward(nn.relu(x), np.ones(3, np.float32))
    assert x.grad.tolist() == [0, 0, 1]


def test_mse_values(rng):
    t = rng.standard_normal((2, 3, 4)).astype(np.float32)
    assert nn.mse_loss(t, t).item() == 0.0
    assert nn.mse_loss(t + 2, t).item() == pytest.approx(4.0, rel=1e-6)
    p = rng.standard_normal((2, 3, 4))
    q = rng.standard_normal((2, 3, 4))
    acc = 0.0
    for i in range(2):
        for j in range(3):
            for k in range(4):
                acc += (p[i, j, k] - q[i, j, k]) ** 2
    assert nn.mse_loss(p.astype(np.float32), q.astype(np.float32)).item() == pytest.approx(acc / 24, abs=1e-6)
    with pytest.raises(DimensionError):
        nn.mse_loss(p, q[0])


def test_mse_gradient_closed_form(rng):
    p = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    t = rng.standard_normal((3, 4))
    nn.backward(nn.mse_loss(p, t))
    np.testing.assert_allclose(p.grad, 2 * (p.data - t) / 12, rtol=1e-12)


# --- finite differences -------------------------------------------------

@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_gradients(rng, case):
    n, ci, co, h, w, k, s, p, d = case
    spec = ConvSpec(ci, co, k, s, p, d)
    errs = check(lambda x, wt, b: nn.conv2d(x, wt, b, spec),
                 [rng.standard_normal((n, ci, h, w)), rng.standard_normal((co, ci, k, k)),
                  rng.standard_normal(co)], rng)
    assert max(errs.values()) < RTOL, errs


@pytest.mark.parametrize("case", TCONV_CASES)
def test_transposed_conv_gradients(rng, case):
    n, ci, co, h, w, k, s, p, d = case
    spec = ConvSpec(ci, co, k, s, p, d)
    errs = check(lambda x, wt, b: nn.transposed_conv2d(x, wt, b, spec),
                 [rng.standard_normal((n, ci, h, w)), rng.standard_normal((ci, co, k, k)),
                  rng.standard_normal(co)], rng)
    assert max(errs.values()) < RTOL, errs


def distinct_values(rng, shape):
    # spacing well above 2*eps keeps every window's argmax stable under perturbation
    return (rng.permutation(int(np.prod(shape))) * 0.05 + 0.01).reshape(shape) - 0.3 * np.prod(shape) / 20


@pytest.mark.parametrize("shape,k,s", [((1, 1, 4, 4), 2, 2), ((2, 2, 4, 2), 2, 2), ((1, 3, 2, 4), 2, 2),
                                       ((1, 1, 3, 3), 2, 1), ((2, 1, 4, 4), 2, 2)])
def test_maxpool_gradients(rng, shape, k, s):
    errs = check(lambda x: nn.maxpool2d(x, k, s), [distinct_values(rng, shape)], rng)
    assert errs[0] < RTOL


def away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.5 * np.sign(x) + 0.01, x)


@pytest.mark.parametrize("shape", [(3,), (2, 3), (1, 2, 3, 4), (2, 1, 4, 4), (4, 4)])
def test_relu_gradients(rng, shape):
    assert check(nn.relu, [away_from_zero(rng, shape)], rng)[0] < RTOL


@pytest.mark.parametrize("chans", [(1, 1), (2, 3), (1, 2, 2), (3, 1), (4, 4)])
def test_concat_gradients(rng, chans):
    xs = [rng.standard_normal((2, c, 3, 2)) for c in chans]
    errs = check(lambda *ts: nn.concat_channels(ts), xs, rng)
    assert max(errs.values()) < RTOL


@pytest.mark.parametrize("shape", [(2,), (3, 2), (1, 2, 3, 3), (2, 2, 2, 2), (4, 1)])
def test_add_gradients(rng, shape):
    errs = check(nn.add_elementwise, [rng.standard_normal(shape), rng.standard_normal(shape)], rng)
    assert max(errs.values()) < RTOL


@pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 3, 4), (1, 2, 4, 4), (4, 4)])
def test_mse_gradients(rng, shape):
    target = rng.standard_normal(shape)
    assert check(lambda p: nn.mse_loss(p, target), [rng.standard_normal(shape)], rng)[0] < RTOL


@pytest.mark.parametrize("rng_slice", [(0, 1), (1, 3), (0, 3), (2, 3), (1, 2)])
def test_slice_gradients(rng, rng_slice):
    errs = check(lambda x: nn.slice_channels(x, *rng_slice), [rng.standard_normal((2, 3, 2, 2))], rng)
    assert errs[0] < RTOL


def test_composite_graph_gradients(rng):
    spec = ConvSpec(2, 2, 3, 1, 1, 1)

    def net(x, w, b):
        h = nn.relu(nn.conv2d(x, w, b, spec))
        return nn.slice_channels(nn.concat_channels([nn.add_elementwise(h, x), h]), 1, 3)

    x = away_from_zero(rng, (1, 2, 4, 4))
    errs = check(net, [x, rng.standard_normal((2, 2, 3, 3)) * 0.3, rng.standard_normal(2) * 0.1], rng)
    assert max(errs.values()) < RTOL


# --- graph handling -----------------------------------------------------

def test_backward_requires_recorded_graph():
    with pytest.raises(GraphError):
        nn.backward(Tensor(np.ones(1)))
    with pytest.raises(GraphError):
        nn.backward(np.ones(1))


def test_backward_rejects_cycles():
    a = Tensor(np.ones(2), requires_grad=True)
    b = nn.relu(a)
    c = nn.relu(b)
    b._parents = (c,)
    b._backward = lambda g: None
    with pytest.raises(GraphError, match="cycle"):
        nn.backward(c, np.ones(2, np.float32))


def test_gradient_accumulates_over_shared_use(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True, dtype=np.float64)
    y = nn.add_elementwise(x, x)
    nn.backward(y, np.ones((2, 2)))
    assert np.all(x.grad == 2.0)


def test_no_grad_skips_recording():
    p = Parameter(np.ones((1, 1, 1, 1), np.float32))
    with nn.no_grad():
        y = nn.conv2d(np.ones((1, 1, 2, 2), np.float32), p, np.zeros(1, np.float32), ConvSpec(1, 1, 1))
    assert not y.requires_grad


def test_deterministic_forward_backward(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    results = []
    for _ in range(2):
        wp, bp = Parameter(w.copy()), Parameter(np.zeros(4, np.float32))
        y = nn.conv2d(x, wp, bp, ConvSpec(3, 4, 3, 1, 2, 2))
        nn.backward(nn.mse_loss(y, np.zeros_like(y.data)))
        results.append((y.data.copy(), wp.grad.copy()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


# --- ADAM ---------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0], np.float32))
    p.grad = np.zeros(2, np.float32)
    nn.adam_step(p, 1e-4)
    assert p.data.tolist() == [1.0, -2.0] and p.step_count == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), min_size=1, max_size=6))
def test_adam_first_step_moves_by_lr_sign(gs):
    g = np.array(gs, np.float32)
    p = Parameter(np.zeros_like(g))
    p.grad = g
    lr = 1e-4
    nn.adam_step(p, lr)
    assert np.all(np.sign(p.data) == -np.sign(g))
    assert np.all(np.abs(p.data) <= lr * (1 + 1e-5))
    np.testing.assert_allclose(np.abs(p.data), lr, rtol=1e-3)


def test_adam_matches_closed_form_over_steps(rng):
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = Parameter(rng.standard_normal(5), dtype=np.float64)
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g
        nn.adam_step(p, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)
    assert p.step_count == 5


def test_adam_identical_history_identical_update(rng):
    g = rng.standard_normal((3, 3)).astype(np.float32)
    a, b = Parameter(np.ones((3, 3), np.float32)), Parameter(np.ones((3, 3), np.float32))
    for _ in range(3):
        a.grad, b.grad = g.copy(), g.copy()
        nn.adam_step(a, 1e-4)
        nn.adam_step(b, 1e-4)
    assert np.array_equal(a.data, b.data)


def test_adam_rejects_non_finite_gradient():
    p = Parameter(np.zeros(2, np.float32), name="layer7.weight")
    p.grad = np.array([0.0, np.nan], np.float32)
    with pytest.raises(NumericError, match="layer7.weight"):
        nn.adam_step(p, 1e-4)
