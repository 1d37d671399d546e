import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codecsep import autodiff as ad
from codecsep.autodiff import Tensor
from codecsep.autodiff.gradcheck import REGISTRY, GradCheck, register


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_snake_values():
    x = Tensor(np.array([0.0, math.pi / 2, -math.pi / 2]))
    np.testing.assert_allclose(ad.snake(x).data, [0.0, math.pi / 2 + 1, -math.pi / 2 + 1])


def test_sum_gradients():
    x = leaf(np.random.default_rng(0).standard_normal((2, 3, 4)))
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    z = leaf(np.zeros(5))
    ad.sum_(ad.snake(z)).backward()
    np.testing.assert_array_equal(z.grad, np.ones(5))


@pytest.mark.parametrize("op", sorted(REGISTRY))
@pytest.mark.parametrize("seed", range(5))
def test_every_registered_op_passes_gradcheck(op, seed):
    report = ad.grad_check(op, seed=seed)
    assert report.passed, str(report)


def test_snake_with_explicit_shape():
    assert ad.grad_check("snake", [(4, 8)], 1e-3).passed


def test_corrupted_backward_is_caught():
    def bad_square(x):
        out = ad.square(x)
        # wrong by a factor of 2 on purpose
        out._backward = lambda g: (g * x.data,)
        return out

    register("corrupted_square", GradCheck(bad_square, [(3, 3)]))
    try:
        report = ad.grad_check("corrupted_square")
        assert not report.passed
        assert str(report).startswith("FAIL")
    finally:
        REGISTRY.pop("corrupted_square")


def test_unknown_op():
    with pytest.raises(KeyError):
        ad.grad_check("no-such-op")


def _graph(x, w):
    return ad.sum_(ad.tanh(ad.linear(ad.snake(x), w)))


def _graph2(x, w):
    return ad.mean(ad.square(ad.linear(x, w)))


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    xa, wa = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    a, b = 0.7, -1.9

    def grads(fn):
        x, w = leaf(xa), leaf(wa)
        fn(x, w).backward()
        return x.grad, w.grad

    x, w = leaf(xa), leaf(wa)
    ad.add(ad.scale(_graph(x, w), a), ad.scale(_graph2(x, w), b)).backward()
    gf, gg = grads(_graph), grads(_graph2)
    np.testing.assert_allclose(x.grad, a * gf[0] + b * gg[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(w.grad, a * gf[1] + b * gg[1], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding,kernel", [(1, 1, 3), (2, 1, 4), (3, 2, 6), (4, 2, 8)])
def test_transposed_conv_is_adjoint_of_conv(stride, padding, kernel):
    rng = np.random.default_rng(stride)
    cin, cout, T = 3, 5, 24
    w = rng.standard_normal((cout, cin, kernel))
    x = rng.standard_normal((2, cin, T))
    y = ad.conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
    extra = T - ad.conv_transposed_out_len(y.shape[-1], kernel, stride, padding)
    u = rng.standard_normal(y.shape)
    # <conv(x), u> == <x, conv_transposed(u)> with the same weights in (Cin', Cout', K) layout
    xt = ad.conv1d_transposed(Tensor(u), Tensor(w), stride=stride, padding=padding, output_padding=extra).data
    assert xt.shape == x.shape
    assert np.sum(y * u) == pytest.approx(np.sum(x * xt), rel=1e-12)
    # and it equals the input-gradient of conv1d
    xl = leaf(x)
    ad.sum_(ad.mul(ad.conv1d(xl, Tensor(w), stride=stride, padding=padding), Tensor(u))).backward()
    np.testing.assert_allclose(xl.grad, xt, rtol=1e-12, atol=1e-12)


def test_conv_length_formulas():
    assert ad.conv_out_len(64, 8, 4, 2) == 16
    assert ad.conv_transposed_out_len(16, 8, 4, 2) == 64
    assert ad.conv_transposed_out_len(10, 6, 3, 2, 1) == 30


def test_passthrough_grad_routes_to_first_argument():
    a, b = leaf([1.0, 2.0]), leaf([10.0, 20.0])
    out = ad.passthrough_grad(a, b)
    np.testing.assert_array_equal(out.data, b.data)
    ad.sum_(ad.scale(out, 3.0)).backward()
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])
    assert b.grad is None


def test_stop_gradient_and_no_grad():
    x = leaf([1.0, 2.0])
    y = ad.add(ad.stop_gradient(ad.square(x)), x)
    ad.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    with ad.no_grad():
        z = ad.square(leaf([3.0]))
    assert not z.requires_grad


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log10(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(ad.NonFiniteError):
        ad.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))


def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    y = ad.sum_(ad.square(x))
    y.backward()
    with pytest.raises(ad.GraphConsumedError):
        y.backward()


def test_float32_is_preserved():
    x = Tensor(np.ones(3, dtype=np.float32))
    for out in (ad.scale(x, 0.1), ad.add(x, 1.0), ad.mul(x, 2.5), ad.snake(x)):
        assert out.dtype == np.float32


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    x, w = rng.standard_normal((2, 3, 20)).astype(np.float32), rng.standard_normal((4, 3, 5)).astype(np.float32)
    a = ad.conv1d(Tensor(x), Tensor(w), stride=2, padding=2).data
    b = ad.conv1d(Tensor(x), Tensor(w), stride=2, padding=2).data
    assert a.tobytes() == b.tobytes()


# -- optimiser -----------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    state = ad.AdamState()
    ad.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    ad.adam_step(p, {"w": None}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


@given(st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
@settings(max_examples=25, deadline=None)
def test_adam_constant_gradient_step_is_lr(g, sign):
    p = {"w": np.array([0.0])}
    state = ad.AdamState()
    prev = 0.0
    for _ in range(200):
        ad.adam_step(p, {"w": np.array([sign * g])}, state, lr=0.01)
        step = abs(p["w"][0] - prev)
        prev = p["w"][0]
    assert step == pytest.approx(0.01, rel=1e-3)


def test_adam_quadratic_converges():
    w = Tensor(np.array([5.0]), requires_grad=True)
    opt = ad.Adam({"w": w}, lr=1e-2)
    for _ in range(2000):
        opt.zero_grad()
        ad.sum_(ad.square(ad.sub(w, 1.5))).backward()
        opt.step()
    assert abs(w.data[0] - 1.5) < 1e-3


def test_plateau_halving_trace():
    sched = ad.PlateauHalving(1.0, patience=2, start_epoch=5)
    lrs = []
    for epoch in range(1, 13):
        lrs.append(sched.lr)
        sched.step(epoch, 0.0)      # never improves after epoch 1
    assert lrs == [1, 1, 1, 1, 1, 1, 1, 0.5, 0.5, 0.25, 0.25, 0.125]


def test_plateau_resets_on_improvement():
    sched = ad.PlateauHalving(1.0, patience=2, start_epoch=5)
    scores = [1, 2, 3, 4, 5, 5, 6, 6, 6, 6]
    lrs = []
    for epoch, s in enumerate(scores, start=1):
        lrs.append(sched.lr)
        sched.step(epoch, s)
    assert lrs == [1, 1, 1, 1, 1, 1, 1, 1, 1, 0.5]
