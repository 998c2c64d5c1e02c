import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilinear_ssm import autodiff as ad
from bilinear_ssm.autodiff import NonFiniteError, ShapeError, Tape, Tensor, grad_check


def fd_grad(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def tape_grad(fn, *values):
    tape = Tape()
    leaves = [tape.variable(v) for v in values]
    loss = fn(*leaves)
    g = tape.backward(loss)
    return loss, [g[t.node] for t in leaves]


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)


# analytic values -----------------------------------------------------------


def test_softplus_sigmoid_tanh_at_zero():
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    _, (g,) = tape_grad(lambda x: ad.tanh(x), np.array(0.0))
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    assert g == pytest.approx(1.0)


def test_softplus_is_stable_for_large_inputs():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = ad.softplus(Tensor(x)).value
    assert np.all(np.isfinite(out))
    assert out[-1] == 800.0 and out[0] == 0.0


def test_linear_map_gradient():
    W = np.eye(2)
    _, (gx,) = tape_grad(lambda x: ad.sum(ad.matmul(Tensor(W), x)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(gx, [1.0, 1.0])


def test_sigmoid_product_gradient():
    _, (ga, gb) = tape_grad(lambda a, b: ad.sigmoid(a) * b, np.array(0.0), np.array(2.0))
    assert ga == pytest.approx(0.5, abs=1e-15)
    assert gb == pytest.approx(0.5, abs=1e-15)


def test_grad_check_square():
    rep = grad_check(lambda p: p["x"] * p["x"], {"x": np.array(3.0)}, step=1e-5)
    _, (g,) = tape_grad(lambda x: x * x, np.array(3.0))
    assert g == pytest.approx(6.0, abs=1e-8)
    assert rep.ok and rep.max_error < 1e-8


# primitives vs finite differences -------------------------------------------

UNARY = {
    "tanh": ad.tanh,
    "exp": ad.exp,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "silu": ad.silu,
    "neg": ad.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3)),
                elements=st.floats(-2, 2)))
def test_unary_gradients(name, x):
    fn = UNARY[name]
    w = np.linspace(0.5, 1.5, x.size).reshape(x.shape)
    f = lambda v: float(np.sum(fn(Tensor(v)).value * w))  # noqa: E731
    _, (g,) = tape_grad(lambda t: ad.sum(fn(t) * w), x)
    assert rel_err(g, fd_grad(f, x)) < 1e-5


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 10_000), bshape=st.sampled_from([(3, 2), (2,), (1, 2), (3, 1), ()]))
def test_binary_gradients_with_broadcasting(name, seed, bshape):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-2, 2, (3, 2))
    b = np.asarray(rng.uniform(0.5, 2, bshape) * rng.choice([-1, 1], bshape))
    fn = BINARY[name]
    _, (ga, gb) = tape_grad(lambda x, y: ad.sum(fn(x, y) * np.arange(1.0, 7.0).reshape(3, 2)), a, b)
    f_a = lambda v: float(np.sum(fn(Tensor(v), Tensor(b)).value * np.arange(1.0, 7.0).reshape(3, 2)))  # noqa: E731
    f_b = lambda v: float(np.sum(fn(Tensor(a), Tensor(v)).value * np.arange(1.0, 7.0).reshape(3, 2)))  # noqa: E731
    assert ga.shape == a.shape and np.shape(gb) == b.shape
    assert rel_err(ga, fd_grad(f_a, a)) < 1e-5
    assert rel_err(np.asarray(gb), fd_grad(f_b, b)) < 1e-5


@pytest.mark.parametrize("ashape,bshape", [
    ((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((5, 3, 4), (4, 2)),
    ((3, 4), (5, 4, 2)), ((5, 3, 4), (5, 4, 2)), ((4,), (4,)),
])
def test_matmul_gradients(ashape, bshape, rng):
    a, b = rng.uniform(-2, 2, ashape), rng.uniform(-2, 2, bshape)
    out_shape = np.matmul(a, b).shape
    w = rng.normal(size=out_shape)
    _, (ga, gb) = tape_grad(lambda x, y: ad.sum(ad.matmul(x, y) * w), a, b)
    assert rel_err(ga, fd_grad(lambda v: float(np.sum((v @ b) * w)), a)) < 1e-6
    assert rel_err(gb, fd_grad(lambda v: float(np.sum((a @ v) * w)), b)) < 1e-6


def test_linear_matches_matmul_with_transpose(rng):
    x, W = rng.normal(size=(5, 3, 4)), rng.normal(size=(2, 4))
    w = rng.normal(size=(5, 3, 2))
    _, (gx, gw) = tape_grad(lambda a, b: ad.sum(ad.linear(a, b) * w), x, W)
    _, (hx, hw) = tape_grad(lambda a, b: ad.sum(ad.matmul(a, ad.swapaxes(b, 0, 1)) * w), x, W)
    np.testing.assert_allclose(ad.linear(Tensor(x), Tensor(W)).value, x @ W.T, atol=1e-14)
    np.testing.assert_allclose(gx, hx, atol=1e-12)
    np.testing.assert_allclose(gw, hw, atol=1e-12)


def test_structural_primitives_gradients(rng):
    x = rng.uniform(-2, 2, (4, 3))
    v = rng.uniform(-2, 2, (4, 3))
    w = rng.normal(size=(4, 3, 3))

    def f(t):
        parts = [
            ad.sum(ad.diag_embed(t) * w),
            ad.sum(ad.row_scale(t, ad.diag_embed(t)) * w),
            ad.sum(ad.concatenate([t, t * 2.0], axis=0) * np.arange(24.0).reshape(8, 3)),
            ad.sum(ad.stack([t, t * t], axis=1) * np.arange(24.0).reshape(4, 2, 3)),
            ad.sum(ad.broadcast_to(t[:, :1], (4, 3)) * v),
            ad.sum(ad.reshape(t, (3, 4)) * np.arange(12.0).reshape(3, 4)),
            ad.sum(ad.swapaxes(t, 0, 1) * v.T),
            ad.mean(t[1:3, ::2] * 3.0),
            ad.sum(ad.sum(t, axis=0, keepdims=True) * np.arange(3.0)),
        ]
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    _, (g,) = tape_grad(f, x)
    assert rel_err(g, fd_grad(lambda a: float(f(Tensor(a)).value), x)) < 1e-6


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("softplus", Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.value, math.log(2))
    with pytest.raises(ValueError):
        ad.apply_primitive("no-such-op", Tensor(1.0))


def test_three_layer_composite_against_finite_differences(rng):
    W1, W2, W3 = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 1))
    x = rng.uniform(-2, 2, (6, 4))

    def f(a, b, c):
        return ad.mean(ad.softplus(ad.matmul(ad.tanh(ad.matmul(ad.silu(ad.matmul(x, a)), b)), c)))

    _, grads = tape_grad(f, W1, W2, W3)
    for i, (W, g) in enumerate(zip((W1, W2, W3), grads)):
        def num(v, i=i):
            args = [W1, W2, W3]
            args[i] = v
            return float(f(*[Tensor(a) for a in args]).value)
        assert rel_err(g, fd_grad(num, W)) < 1e-6


# tape semantics -------------------------------------------------------------


def test_unreachable_leaf_gets_exact_zero():
    tape = Tape()
    a, b = tape.variable(np.array([1.0, 2.0])), tape.variable(np.array([3.0]))
    _ = b * 2.0
    g = tape.backward(ad.sum(a * a))
    np.testing.assert_array_equal(g[b.node], [0.0])


def test_backward_is_linear_in_upstream(rng):
    x = rng.normal(size=(3, 3))
    tape = Tape()
    t = tape.variable(x)
    loss = ad.sum(ad.tanh(ad.matmul(t, t)))
    g1 = tape.backward(loss)[t.node]
    g2 = tape.backward(loss, upstream=2.0)[t.node]
    np.testing.assert_array_equal(g2, 2.0 * g1)


def test_backward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(4, 3))

    def run():
        tape = Tape()
        t = tape.variable(x)
        return tape.backward(ad.sum(ad.exp(t[1:] * t[:-1])) + ad.sum(t))[t.node]

    np.testing.assert_array_equal(run(), run())


def test_slices_accumulate_into_one_gradient(rng):
    x = rng.normal(size=(6, 2))
    tape = Tape()
    t = tape.variable(x)
    loss = ad.sum(t[0] * t[0]) + ad.sum(t[0::2]) + ad.sum(t[1:4] * 3.0)
    g = tape.backward(loss)[t.node]
    expect = np.zeros_like(x)
    expect[0] += 2 * x[0]
    expect[0::2] += 1.0
    expect[1:4] += 3.0
    np.testing.assert_allclose(g, expect, atol=1e-15)


def test_loss_must_be_scalar_and_on_tape():
    tape = Tape()
    a = tape.variable(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(a * 2.0)
    with pytest.raises(ValueError):
        tape.backward(ad.sum(Tensor(np.ones(3))))


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NonFiniteError):
        ad.div(Tensor(1.0), Tensor(0.0))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_grad_check_reports_a_wrong_gradient():
    def broken(p):
        x = p["x"]
        # value of x*x but recorded as a linear op: the tape gradient is wrong
        return ad.sum(x * np.array(x.value))

    rep = grad_check(broken, {"x": np.array([1.0, 2.0])})
    assert not rep.ok and "x" in rep.failures
