import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moetta import autodiff as ad
from moetta.autodiff import Tape, Tensor, grad_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def leaf(shape, seed, scale=1.0, positive=False):
    v = np.random.default_rng(seed).normal(size=shape) * scale
    if positive:
        v = np.abs(v) + 0.5
    return Tensor(v, requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_matmul_hand_case():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).values.tolist() == [[11.0]]


def test_matmul_gradient():
    a, b = leaf((5, 7), 0), leaf((7, 3), 1)
    assert grad_check(lambda: ad.sum(ad.matmul(a, b)), [a, b]) <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_batched_matmul_with_shared_weight():
    a, w = leaf((2, 3, 4), 2), leaf((4, 5), 3)
    assert grad_check(lambda: ad.sum(ad.square(a @ w)), [a, w]) <= 1e-6


# ---------------------------------------------------------------- softmax


@pytest.mark.parametrize(
    "row, expected",
    [([0.0, 0.0], [0.5, 0.5]), ([0.0, math.log(3.0)], [0.25, 0.75]), ([1000.0, 0.0], [1.0, 0.0])],
)
def test_softmax_examples(row, expected):
    np.testing.assert_allclose(ad.softmax(Tensor(row)).values, expected, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ad.NumericError):
        ad.softmax(Tensor([0.0, np.inf]))


@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, c):
    p = ad.softmax(Tensor(x)).values
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert (p >= 0).all()
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).values, p, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_allclose(ad.log_softmax(Tensor(x)).values, np.log(ad.softmax(Tensor(x)).values), atol=1e-12)


# ---------------------------------------------------------------- detach


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        d = ad.detach(x)
        tape.backward(ad.sum(ad.square(d)) + ad.sum(x) * 0.0)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(d.values, x.values)
    assert not d.requires_grad


def test_x_times_detached_x():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * ad.detach(x))
    assert x.grad == pytest.approx(3.0)


@pytest.mark.parametrize("p, grad", [(0.7, 1 / 0.7), (1.0, 1.0), (0.25, 4.0)])
def test_detach_scale(p, grad):
    t = Tensor(p, requires_grad=True)
    with Tape() as tape:
        out = ad.detach_scale(t)
        tape.backward(out)
    assert out.item() == 1.0
    assert t.grad == pytest.approx(grad, abs=1e-12)
    assert grad_check(lambda: ad.detach_scale(t) * 1.0, [t]) <= 1e-6


@given(st.floats(1e-6, 1.0))
def test_detach_scale_forward_is_one(p):
    assert abs(ad.detach_scale(Tensor(p)).item() - 1.0) <= 1e-15


@pytest.mark.parametrize("p", [0.0, -0.1])
def test_detach_scale_rejects_non_positive(p):
    with pytest.raises(ad.NumericError):
        ad.detach_scale(Tensor(p))


# ---------------------------------------------------------------- backward


def test_backward_of_sum():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_fan_out_accumulates():
    x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
    with Tape() as tape:
        tape.backward(x * y + x * y)
    assert x.grad == 10.0 and y.grad == 4.0


def test_splitting_a_use_doubles_gradient():
    x = leaf((4,), 7)
    with Tape() as tape:
        tape.backward(ad.sum(ad.tanh(x)))
    once = x.grad.copy()
    x.grad = None
    with Tape() as tape:
        tape.backward(ad.sum(ad.tanh(x)) + ad.sum(ad.tanh(x)))
    np.testing.assert_allclose(x.grad, 2 * once)


def test_backward_needs_scalar_root():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape, pytest.raises(ad.DimensionError):
        tape.backward(x * 2.0)


def test_no_grad_for_frozen_leaf():
    x, c = Tensor(1.5, requires_grad=True), Tensor(2.0)
    with Tape() as tape:
        tape.backward(x * c)
    assert c.grad is None


def test_ops_outside_tape_do_not_record():
    x = Tensor(1.0, requires_grad=True)
    assert (x * 2.0).node is None


# ---------------------------------------------------------------- grad_check harness


def test_grad_check_quadratic():
    x = leaf((6,), 11)
    assert grad_check(lambda: ad.sum(ad.square(x)) * 0.5, [x]) <= 1e-8


def test_grad_check_detects_wrong_backward():
    x = leaf((5,), 12, positive=True)

    def bad_square(t):
        return ad._record(t.values**2, (t,), lambda g: (g * t.values,))  # should be 2x

    assert grad_check(lambda: ad.sum(bad_square(x)), [x]) > 1e-2


UNARY = {
    "exp": (ad.exp, False),
    "log": (ad.log, True),
    "tanh": (ad.tanh, False),
    "square": (ad.square, False),
    "gelu": (ad.gelu, False),
    "xlogx": (ad.xlogx, True),
    "softmax": (ad.softmax, False),
    "log_softmax": (ad.log_softmax, False),
    "normalize": (lambda t: ad.normalize(t, 1e-5), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_unary_gradients(name, seed):
    fn, positive = UNARY[name]
    x = leaf((3, 4), seed, positive=positive)
    w = np.random.default_rng(seed + 100).normal(size=(3, 4))
    assert grad_check(lambda: ad.sum(fn(x) * w), [x]) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_binary_and_structural_gradients(seed):
    a, b = leaf((2, 3), seed), leaf((3,), seed + 1, positive=True)

    def f():
        z = ad.div(ad.sub(ad.add(a, b), ad.mul(a, b)), b)
        z = ad.concat([z, ad.transpose(z, (0, 1))], axis=0)
        z = ad.reshape(z, (2, 6))
        z = ad.getitem(z, (slice(None), slice(1, 5)))
        z = ad.take_rows(z, np.array([[1, 0], [1, 1]]))
        return ad.mean(ad.square(z)) + ad.sum(ad.broadcast_to(b, (4, 3)))

    assert grad_check(f, [a, b]) <= 1e-4


def test_xlogx_at_zero():
    assert ad.xlogx(Tensor([0.0, 1.0])).values.tolist() == [0.0, 0.0]


@given(arrays(np.float64, (2, 5), elements=finite))
def test_normalize_moments(x):
    if np.ptp(x, axis=-1).min() < 1e-3:
        return
    y = ad.normalize(Tensor(x), 1e-5).values
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), x.var(axis=-1) / (x.var(axis=-1) + 1e-5), atol=1e-12)
