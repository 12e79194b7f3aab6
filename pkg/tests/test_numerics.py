import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, logdet_eig, matmul_loops, rel_err, softmax_cols_loops
from wbdit import numerics as nx
from wbdit.numerics import NonFiniteError, NotPositiveDefiniteError, Rng, ShapeError, Tape, backward


def test_matmul_identity_and_hand_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(np.eye(2), a), a)
    np.testing.assert_array_equal(nx.matmul(a, np.array([[0.0], [1.0]])), [[2.0], [4.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(nx.matmul(a, b) - matmul_loops(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (4, 2), elements=finite),
    arrays(np.float64, (2, 5), elements=finite),
)
def test_matmul_associative(a, b, c):
    left = nx.matmul(nx.matmul(a, b), c)
    right = nx.matmul(a, nx.matmul(b, c))
    scale = max(1.0, np.abs(left).max())
    assert np.max(np.abs(left - right)) <= 1e-9 * scale


@pytest.mark.parametrize(
    "col, expected",
    [([0.0, 0.0], [0.5, 0.5]), ([1000.0, 1000.0], [0.5, 0.5]), ([0.0, math.log(3.0)], [0.25, 0.75])],
)
def test_softmax_columns_examples(col, expected):
    out = nx.softmax_columns(np.array(col).reshape(2, 1))
    np.testing.assert_allclose(out[:, 0], expected, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_columns_are_distributions(m):
    out = nx.softmax_columns(m)
    assert np.all(np.abs(out.sum(axis=0) - 1.0) <= 1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out, softmax_cols_loops(m), atol=1e-14)


def test_softmax_entries_strictly_inside_unit_interval():
    out = nx.softmax_columns(np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.0]]))
    assert np.all(out > 0) and np.all(out < 1)


def test_relu_values_and_subgradient():
    np.testing.assert_array_equal(nx.relu(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(nx.relu(-np.ones((2, 3))), np.zeros((2, 3)))
    tape = Tape()
    x = tape.parameter(np.array([[3.0, -3.0, 0.0]]))
    grads = backward(tape, nx.sum(nx.relu(x)))
    np.testing.assert_array_equal(grads[x.id], [[1.0, 0.0, 0.0]])


def test_logdet_examples():
    assert nx.logdet_psd(np.eye(3)) == 0.0
    assert abs(nx.logdet_psd(np.diag([2.0, 3.0])) - math.log(6.0)) < 1e-15
    rng = np.random.default_rng(11)
    V = rng.standard_normal((4, 2))
    m = np.eye(4) + V @ V.T
    assert abs(nx.logdet_psd(m) - logdet_eig(m)) < 1e-10


def test_logdet_rejects_non_psd():
    with pytest.raises(NotPositiveDefiniteError):
        nx.logdet_psd(np.diag([1.0, -1.0]))
    with pytest.raises(NotPositiveDefiniteError):
        nx.logdet_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_backward_sum_gives_ones():
    tape = Tape()
    a = tape.parameter(np.arange(6.0).reshape(2, 3))
    grads = backward(tape, nx.sum(a))
    np.testing.assert_array_equal(grads[a.id], np.ones((2, 3)))


def test_backward_zero_at_minimum():
    tape = Tape()
    b = np.arange(4.0).reshape(2, 2)
    a = tape.parameter(b.copy())
    grads = backward(tape, nx.sum(nx.square(nx.sub(a, b))))
    np.testing.assert_array_equal(grads[a.id], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    tape = Tape()
    a = tape.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        backward(tape, nx.relu(a))


def test_unused_parameter_gets_zero_gradient():
    tape = Tape()
    a = tape.parameter(np.ones((2, 2)))
    b = tape.parameter(np.ones(3))
    grads = backward(tape, nx.sum(a))
    np.testing.assert_array_equal(grads[b.id], np.zeros(3))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_result_is_reported():
    with pytest.raises(NonFiniteError):
        nx.mul(np.array([[1e308]]), 10.0)


def test_backward_visits_shared_node_once():
    # y = x * x via two uses of the same node: gradient must be 2x, not 4x
    tape = Tape()
    x = tape.parameter(np.array([[1.5, -2.0]]))
    grads = backward(tape, nx.sum(nx.mul(x, x)))
    np.testing.assert_allclose(grads[x.id], 2 * np.array([[1.5, -2.0]]))


# -- finite-difference checks for every differentiable op ------------------

RNG = np.random.default_rng(2024)
W = RNG.uniform(-2, 2, (3, 4))  # fixed random weights to make losses generic


def _u(*shape):
    return RNG.uniform(-2, 2, shape)


OPS = {
    "matmul_left": (lambda x: nx.matmul(x, _B), (3, 5)),
    "matmul_right": (lambda x: nx.matmul(_A, x), (5, 4)),
    "matmul_batched": (lambda x: nx.sum(nx.matmul(x, _B3), axis=0), (3, 5)),
    "add_broadcast": (lambda x: nx.add(_C, x), (4,)),
    "sub": (lambda x: nx.sub(_C, nx.mul(x, x)), (3, 4)),
    "mul": (lambda x: nx.mul(x, _C), (3, 4)),
    "neg": (lambda x: nx.neg(x), (3, 4)),
    "square": (lambda x: nx.square(x), (3, 4)),
    "transpose": (lambda x: nx.transpose(x), (4, 3)),
    "reshape": (lambda x: nx.reshape(x, (3, 4)), (4, 3)),
    "getitem": (lambda x: nx.getitem(x, (slice(None), slice(0, 4))), (3, 6)),
    "sum_axis": (lambda x: nx.mul(nx.sum(x, axis=1, keepdims=True), _C), (3, 2)),
    "mean": (lambda x: nx.mul(nx.mean(x, axis=0), _C), (5, 4)),
    "relu": (lambda x: nx.relu(x), (3, 4)),
    "softmax_columns": (lambda x: nx.softmax_columns(x), (3, 4)),
    "logdet_psd": (lambda x: nx.mul(nx.logdet_psd(nx.add(np.eye(4), nx.matmul(nx.transpose(x), x))), _C), (5, 4)),
}
_A = _u(3, 5)
_B = _u(5, 4)
_B3 = _u(2, 5, 4)
_C = _u(3, 4)


def _scalarize(out):
    return nx.sum(nx.mul(out, W)) if nx.value_of(out).shape == W.shape else nx.sum(out)


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_matches_finite_differences(name):
    fn, shape = OPS[name]
    x0 = _u(*shape)
    if name == "relu":
        x0[np.abs(x0) < 1e-3] = 0.5  # stay off the kink
    tape = Tape()
    x = tape.parameter(x0)
    loss = _scalarize(fn(x))
    analytic = backward(tape, loss)[x.id]
    numeric = central_diff(lambda v: float(nx.value_of(_scalarize(fn(v)))), x0)
    assert rel_err(analytic, numeric) < 1e-5


def test_rng_reproducible_million_draws():
    a = Rng(123).normal(1_000_000)
    b = Rng(123).normal(1_000_000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[:10], Rng(124).normal(10))


def test_rng_derive_is_addressable():
    assert np.array_equal(Rng.derive(5, 1, 2).normal(4), Rng.derive(5, 1, 2).normal(4))
    assert not np.array_equal(Rng.derive(5, 1, 2).normal(4), Rng.derive(5, 2, 1).normal(4))
