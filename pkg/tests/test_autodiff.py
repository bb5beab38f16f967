import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora2 import autodiff as ad


def fd_grad(f, x, h=1e-5):
    """Central differences of a numpy -> float function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))


def test_matmul_identity_and_hand_case():
    m = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert np.array_equal((ad.Variable(np.eye(2)) @ ad.Variable(m)).value, m)
    out = ad.matmul(ad.Variable([[1, 2], [3, 4]]), ad.Variable([[0], [1]]))
    assert np.array_equal(out.value, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Variable(np.ones((2, 3))), ad.Variable(np.ones((2, 3))))


def test_matmul_gradient_is_ones_times_bt(rng):
    a = ad.Variable(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 2))
    ad.backward(ad.sum_all(ad.matmul(a, ad.Variable(b))))
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.T, rtol=0, atol=1e-14)
    numeric = fd_grad(lambda v: float((v @ b).sum()), a.value)
    assert rel_err(a.grad, numeric) <= 1e-6


def test_softmax_examples():
    p = ad.softmax_rows(ad.Variable([[0.0, 0, 0, 0], [np.log(1), np.log(3), -np.inf, -np.inf]][:1]))
    assert np.allclose(p.value, 0.25, atol=1e-15)
    q = ad.softmax_rows(ad.Variable([[np.log(1.0), np.log(3.0)]]))
    assert np.allclose(q.value, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one_and_shift_invariant(p, k, c, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(p, k))
    s = ad.softmax_rows(ad.Variable(x)).value
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-12)
    assert np.allclose(ad.softmax_rows(ad.Variable(x + c)).value, s, rtol=0, atol=1e-12)


def test_backward_simple_cases(rng):
    x = ad.Variable(rng.normal(size=(3, 2)), requires_grad=True)
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 2)))
    ad.zero_grads([x])
    assert not x.grad.any()
    ad.backward(ad.scale(ad.sum_all(ad.square(x)), 0.5))
    assert np.allclose(x.grad, x.value, rtol=0, atol=1e-15)


def test_backward_accumulates_without_zero_grads(rng):
    x = ad.Variable(rng.normal(size=(2, 2)), requires_grad=True)
    loss = ad.sum_all(ad.square(x))
    ad.backward(loss)
    ad.backward(loss)
    assert np.allclose(x.grad, 4 * x.value)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.Variable(np.ones((2, 2)), requires_grad=True))


def test_composite_matmul_softmax_matches_fd(rng):
    w = rng.normal(size=(4, 3))
    t = rng.normal(size=(5, 3))

    def f(v):
        return ad.sum_all(ad.multiply(ad.softmax_rows(ad.matmul(v, ad.Variable(w))),
                                      ad.Variable(t)))

    assert ad.grad_check(f, rng.normal(size=(5, 4))) <= 1e-6


def test_grad_check_on_sum_is_roundoff_only(rng):
    assert ad.grad_check(ad.sum_all, rng.normal(size=(4, 4))) < 1e-10


def test_grad_check_quadratic_form(rng):
    q = rng.normal(size=(5, 5))

    def f(v):
        return ad.sum_all(ad.multiply(v, ad.matmul(ad.Variable(q), v)))

    assert ad.grad_check(f, rng.normal(size=(5, 5))) <= 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_validates_inputs(rng):
    with pytest.raises(ValueError):
        ad.grad_check(ad.sum_all, np.ones((2, 2)), h=1e-2)
    with pytest.raises(FloatingPointError):
        ad.grad_check(lambda v: ad.sum_all(ad.log(v)), -np.ones((2, 2)))


UNARY = {
    "exp": lambda v: ad.exp(v),
    "log": lambda v: ad.log(ad.add_scalar(ad.square(v), 0.5)),
    "abs": lambda v: ad.abs_(v),
    "square": ad.square,
    "softplus": ad.softplus,
    "softmax": ad.softmax_rows,
    "transpose": ad.transpose,
    "mean_all": lambda v: ad.mean_all(v),
    "sum_rows": ad.sum_rows,
    "mean_rows": ad.mean_rows,
    "slice_rows": lambda v: ad.slice_rows(v, 0, max(1, v.shape[0] - 1)),
    "slice_cols": lambda v: ad.slice_cols(v, 0, max(1, v.shape[1] - 1)),
    "concat_rows": lambda v: ad.concat_rows([v, ad.scale(v, 2.0)]),
    "concat_cols": lambda v: ad.concat_cols([ad.exp(v), v]),
    "reshape": lambda v: ad.reshape(v, (1, v.value.size)),
    "diag_left": lambda v: ad.diag_left(ad.slice_cols(v, 0, 1), v),
    "subtract": lambda v: ad.subtract(ad.exp(v), v),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_every_op_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    weights = None
    worst = 0.0
    for _ in range(5):
        shape = tuple(int(s) for s in rng.integers(1, 7, size=2))
        x = rng.normal(size=shape)
        if name == "abs":
            x = np.where(np.abs(x) < 1e-2, 0.5, x)
        out_shape = UNARY[name](ad.Variable(x)).shape
        weights = rng.normal(size=out_shape)

        def f(v, w=weights):
            return ad.sum_all(ad.multiply(UNARY[name](v), ad.Variable(w)))

        worst = max(worst, ad.grad_check(f, x))
    assert worst <= 1e-6


def test_backward_is_deterministic(rng):
    x0 = rng.normal(size=(6, 6))
    grads = []
    for _ in range(2):
        x = ad.Variable(x0, requires_grad=True)
        loss = ad.sum_all(ad.softmax_rows(ad.matmul(x, ad.transpose(x))))
        ad.zero_grads([x])
        ad.backward(loss)
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_intermediate_nodes_hold_their_gradient(rng):
    x = ad.Variable(rng.normal(size=(2, 3)), requires_grad=True)
    y = ad.scale(x, 3.0)
    ad.backward(ad.sum_all(y))
    assert np.array_equal(y.grad, np.ones((2, 3)))
    assert np.array_equal(x.grad, np.full((2, 3), 3.0))
