import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilinear_ssm import autodiff as ad
from bilinear_ssm.autodiff import ShapeError, Tape
from bilinear_ssm.scan import (
    DIAGONAL, MATRIX, ScanElement, apply_element, combine, identity_element, parallel_scan, sequential_scan,
)


def random_elements(rng, L, batch, d_s, kind, spread=0.6):
    offset = rng.normal(size=(L, batch, d_s))
    if kind == DIAGONAL:
        gate = rng.uniform(-1.0, 1.0, (L, batch, d_s))
    else:
        # scaled so long products neither blow up nor vanish too fast
        gate = rng.normal(scale=spread / np.sqrt(d_s), size=(L, batch, d_s, d_s)) + 0.5 * np.eye(d_s)
    return ScanElement(gate, offset)


def values(e):
    return tuple(np.asarray(ad.as_tensor(x).value) for x in e)


def test_combine_diagonal_example():
    g, b = values(combine((np.array([0.5]), np.array([1.0])), (np.array([0.5]), np.array([1.0]))))
    np.testing.assert_array_equal(g, [0.25])
    np.testing.assert_array_equal(b, [1.5])


@pytest.mark.parametrize("kind", [DIAGONAL, MATRIX])
def test_identity_is_neutral(kind, rng):
    e = random_elements(rng, 1, 1, 3, kind)
    e = ScanElement(e.gate[0], e.offset[0])
    ident = identity_element(e.offset.shape, kind)
    for out in (combine(ident, e), combine(e, ident)):
        for a, b in zip(values(out), e):
            np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", [DIAGONAL, MATRIX])
def test_associativity_fuzz(kind, rng):
    # 10^4 random triples, batched along a leading axis
    d_s = 2 if kind == MATRIX else 3
    e1, e2, e3 = (ScanElement(*(x[:, 0] for x in random_elements(rng, 10_000, 1, d_s, kind, 1.0)))
                  for _ in range(3))
    left = values(combine(combine(e3, e2), e1))
    right = values(combine(e3, combine(e2, e1)))
    for a, b in zip(left, right):
        assert np.max(np.abs(a - b)) < 1e-12


def test_combine_rejects_mixed_kinds(rng):
    d = random_elements(rng, 1, 1, 2, DIAGONAL)
    m = random_elements(rng, 1, 1, 2, MATRIX)
    with pytest.raises(ShapeError):
        combine(d, m)
    with pytest.raises(ShapeError):
        combine((np.ones(3), np.ones(3)), (np.ones(2), np.ones(2)))
    with pytest.raises(ShapeError):
        parallel_scan((np.ones((4, 3, 2)), np.ones((4, 3))))


@pytest.mark.parametrize("kind", [DIAGONAL, MATRIX])
@pytest.mark.parametrize("scan", [parallel_scan, sequential_scan])
def test_identity_gates_give_running_sum(kind, scan, rng):
    L, d_s = 7, 3
    offset = rng.normal(size=(L, d_s))
    gate = identity_element((L, d_s), kind).gate.value
    h0 = rng.normal(size=d_s)
    states = scan((gate, offset), h0).value
    np.testing.assert_allclose(states, h0 + np.cumsum(offset, axis=0), atol=1e-13)


@pytest.mark.parametrize("kind", [DIAGONAL, MATRIX])
@pytest.mark.parametrize("scan", [parallel_scan, sequential_scan])
def test_single_step(kind, scan, rng):
    e = random_elements(rng, 1, 1, 3, kind)
    h0 = rng.normal(size=(1, 3))
    g, b = e.gate[0], e.offset[0]
    expect = g * h0 + b if kind == DIAGONAL else (g @ h0[..., None])[..., 0] + b
    np.testing.assert_allclose(scan(e, h0).value[0], expect, atol=1e-15)


@pytest.mark.parametrize("kind", [DIAGONAL, MATRIX])
@pytest.mark.parametrize("layout", ["blelloch", "doubling"])
def test_parallel_matches_sequential_1000_instances(kind, layout, rng):
    # 20 (d_s, L) cells x 50 batched instances
    worst = 0.0
    for d_s in (1, 3, 8, 16):
        for L in (1, 2, 7, 64, 257):
            e = random_elements(rng, L, 50, d_s, kind)
            h0 = rng.normal(size=(50, d_s))
            par = parallel_scan(e, h0, layout=layout).value
            seq = sequential_scan(e, h0).value
            worst = max(worst, float(np.max(np.abs(par - seq))))
    assert worst < 1e-10


def test_tree_shape_does_not_matter(rng):
    for kind in (DIAGONAL, MATRIX):
        e = random_elements(rng, 100, 4, 5, kind)
        a = parallel_scan(e, layout="blelloch").value
        b = parallel_scan(e, layout="doubling").value
        assert np.max(np.abs(a - b)) < 1e-10


def test_standard_layout_state_shape(rng):
    # per-channel Standard states are (d_i, d_s) with a diagonal gate of the same shape
    gate = rng.uniform(0, 1, (9, 4, 3))
    off = rng.normal(size=(9, 4, 3))
    np.testing.assert_allclose(parallel_scan((gate, off)).value, sequential_scan((gate, off)).value, atol=1e-12)


def test_apply_element_broadcasts_h0(rng):
    e = random_elements(rng, 3, 2, 2, MATRIX)
    h0 = rng.normal(size=2)
    out = apply_element(e, h0).value
    expect = np.einsum("tbij,j->tbi", e.gate, h0) + e.offset
    np.testing.assert_allclose(out, expect, atol=1e-14)


def test_unknown_layout():
    with pytest.raises(ValueError):
        parallel_scan((np.ones((2, 1)), np.ones((2, 1))), layout="skew")


@given(seed=st.integers(0, 2**31), L=st.integers(1, 40), kind=st.sampled_from([DIAGONAL, MATRIX]))
def test_scan_gradients_agree(seed, L, kind):
    rng = np.random.default_rng(seed)
    e = random_elements(rng, L, 2, 3, kind)
    w = rng.normal(size=(L, 2, 3))

    def grads(fn):
        tape = Tape()
        g, b = tape.variable(e.gate), tape.variable(e.offset)
        out = tape.backward(ad.sum(fn((g, b)) * w))
        return out[g.node], out[b.node]

    for a, b in zip(grads(parallel_scan), grads(sequential_scan)):
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=1e-9)


def test_scan_gradient_against_finite_differences(rng):
    e = random_elements(rng, 5, 1, 2, MATRIX)
    w = rng.normal(size=(5, 1, 2))
    rep = ad.grad_check(lambda p: ad.sum(parallel_scan((p["g"], p["b"])) * w),
                        {"g": e.gate, "b": e.offset})
    assert rep.ok, rep.errors
