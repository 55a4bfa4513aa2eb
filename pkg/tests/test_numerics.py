import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import special

from hedgemamba import numerics as nx
from hedgemamba.numerics import NonFiniteError, ShapeError, TapeError, Tensor


def rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_sum_grad_is_twice_input():
    x = Tensor(np.array([[1.5, -2.0], [0.25, 3.0]]), requires_grad=True)
    nx.backward(nx.tsum(nx.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_two_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(3)
    w1, w2 = rand(rng, 4, 5), rand(rng, 5, 2)
    x = rand(rng, 3, 4)

    def f(x, w1, w2):
        return nx.matmul(nx.tanh(nx.matmul(x, w1)), w2)

    assert nx.grad_check(f, [x, w1, w2], step=1e-5) < 1e-4


def test_grad_check_identity_is_exact():
    x = rand(np.random.default_rng(0), 3, 2)
    assert nx.grad_check(lambda t: nx.mul(t, 1.0), x) < 1e-9


UNARY = {
    "exp": nx.exp,
    "log": lambda t: nx.log(nx.add(nx.square(t), 0.5)),
    "sqrt": lambda t: nx.sqrt(nx.add(nx.square(t), 0.5)),
    "square": nx.square,
    "sigmoid": nx.sigmoid,
    "tanh": nx.tanh,
    "silu": nx.silu,
    "softplus": nx.softplus,
    "gelu": nx.gelu,
    "neg": nx.neg,
    "softmax0": lambda t: nx.softmax(t, axis=0),
    "softmax1": lambda t: nx.softmax(t, axis=-1),
    "log_softmax": lambda t: nx.log_softmax(t, axis=-1),
    "cumsum": lambda t: nx.cumsum(t, axis=1),
    "sum_axis": lambda t: nx.tsum(t, axis=0, keepdims=True),
    "mean": lambda t: nx.mean(t, axis=1),
    "transpose": lambda t: nx.transpose(t),
    "reshape": lambda t: nx.reshape(t, (4, 3)),
    "slice": lambda t: t[1:, ::2],
    "fancy": lambda t: nx.getitem(t, (np.array([0, 2, 2]), np.array([1, 0, 1]))),
    "maximum": lambda t: nx.maximum(t, 0.1),
    "concat": lambda t: nx.concat([t, nx.neg(t)], axis=1),
    "pick": lambda t: nx.pick(t, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    x = rand(np.random.default_rng(11), 3, 4)
    assert nx.grad_check(UNARY[name], x, step=1e-5) < 1e-4


BINARY = {
    "add": nx.add,
    "sub": nx.sub,
    "mul": nx.mul,
    "div": lambda a, b: nx.div(a, nx.add(nx.square(b), 1.0)),
    "matmul": lambda a, b: nx.matmul(a, nx.transpose(b)),
    "add_broadcast": lambda a, b: nx.add(a, b[0]),
    "mul_broadcast": lambda a, b: nx.mul(a, nx.reshape(b[:, 0], (3, 1))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(5)
    a, b = rand(rng, 3, 4), rand(rng, 3, 4)
    assert nx.grad_check(BINARY[name], [a, b], step=1e-5) < 1e-4


def test_batched_matmul_gradient():
    rng = np.random.default_rng(2)
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert nx.grad_check(nx.matmul, [a, b]) < 1e-4


def test_take_rows_gradient_scatters_repeats():
    w = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    nx.backward(nx.tsum(nx.take_rows(w, np.array([[1, 1], [3, 0]]))))
    np.testing.assert_array_equal(w.grad, [[1, 1], [2, 2], [0, 0], [1, 1]])


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_array_equal(nx.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.sampled_from([0, 1]))
def test_softmax_slices_are_distributions(x, axis):
    p = nx.softmax(Tensor(x), axis=axis).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)


def test_softmax_is_stable_for_large_logits():
    p = nx.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-300)


def test_softplus_and_silu_reference_points():
    np.testing.assert_allclose(nx.softplus(Tensor(np.log(np.e - 1))).item(), 1.0, atol=1e-12)
    assert abs(nx.softplus(Tensor(0.541324)).item() - 1.0) < 1e-6
    assert abs(nx.silu(Tensor(1.27846)).item() - 1.0) < 1e-5


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(nx.gelu(Tensor(x)).data, 0.5 * x * (1 + special.erf(x / np.sqrt(2))), rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1e6, 1e6)))
def test_concat_then_slice_round_trips(x):
    joined = nx.concat([Tensor(x), Tensor(-x)], axis=1)
    n = x.shape[1]
    np.testing.assert_array_equal(joined[:, :n].data, x)
    np.testing.assert_array_equal(joined[:, n:].data, -x)


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        nx.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        nx.exp(Tensor(np.array([1000.0])))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nx.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_backward_rejects_non_scalar_and_second_call():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        nx.backward(nx.mul(x, 2.0))
    loss = nx.tsum(nx.mul(x, 2.0))
    nx.backward(loss)
    with pytest.raises(TapeError):
        nx.backward(loss)


def test_backward_needs_a_recorded_loss():
    with pytest.raises(TapeError):
        nx.backward(Tensor(1.0))
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        loss = nx.tsum(x)
    with pytest.raises(TapeError):
        nx.backward(loss)


def test_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nx.backward(nx.tsum(x))
    nx.backward(nx.tsum(nx.mul(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_independent_tapes_on_threads():
    results = {}

    def work(k):
        x = Tensor(np.full(4, float(k)), requires_grad=True)
        for _ in range(50):
            x.grad = None
            nx.backward(nx.tsum(nx.square(x)))
        results[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(results[k], np.full(4, 2.0 * k))


def test_multadd_counter_counts_matmul():
    a, b = Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5)))
    with nx.count_multadds() as c:
        nx.matmul(a, b)
    assert c.total == 3 * 4 * 5
