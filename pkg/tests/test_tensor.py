import numpy as np
import pytest

from endocaver import tensor as T
from endocaver.gradcheck import directional_errors, elementwise_errors
from endocaver.tensor import Tensor, count_macs, no_grad

from conftest import leaf, weighted_sum

# relative tolerance of the finite-difference contract (step 1e-3, float64)
TOL = 1e-4


def test_sum_grad_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_grad_is_twice_x():
    x = leaf([1.0, -2.0, 3.5])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_gradients_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_visited_once():
    # y is used twice; reverse replay must sum both contributions exactly once
    x = leaf([2.0])
    y = x * x
    (y + y * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [16.0])


def test_trace_is_reverse_creation_order():
    x = leaf([1.0])
    a = x * 2.0
    b = a + 1.0
    c = b * a
    order = T.trace(c)
    stamps = [t._order for t in order]
    assert stamps == sorted(stamps)
    assert order[-1] is c


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_broadcast_gradient_is_reduced():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.ones(3))
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_matmul_records_macs():
    a = Tensor(np.ones((2, 4, 5)))
    b = Tensor(np.ones((5, 3)))
    with count_macs() as tally:
        T.matmul(a, b)
    assert tally.total == 2 * 4 * 5 * 3


def test_stop_gradient_blocks_flow():
    x = leaf([1.0, 2.0])
    (T.stop_gradient(x) * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


UNARY = {
    "exp": T.exp,
    "log": lambda x: T.log(x * x + 1.0),
    "sqrt": lambda x: T.sqrt(x * x + 0.5),
    "power": lambda x: T.power(x * x + 1.0, 1.5),
    "div": lambda x: 1.0 / (x * x + 1.0),
    "mean": lambda x: x.mean(axis=1, keepdims=True) * x,
    "reshape": lambda x: x.reshape(4, 3) * 2.0,
    "transpose": lambda x: x.transpose(1, 0) * 2.0,
    "concat": lambda x: T.concat([x, x * x], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementary_op_gradients(name, f64):
    rng = np.random.default_rng(3)
    x = leaf(rng.standard_normal((3, 4)))
    fn = UNARY[name]
    errs = directional_errors(lambda: weighted_sum(fn(x)), [x], trials=50, rng=rng)
    assert max(errs) < TOL, name


def test_binary_op_gradients(f64):
    rng = np.random.default_rng(4)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    c = leaf(rng.standard_normal((3, 1)))
    errs = directional_errors(lambda: weighted_sum(T.matmul(a - c, b) * 0.5 + T.matmul(a * c, b)),
                              [a, b, c], trials=50, rng=rng)
    assert max(errs) < TOL


def test_elementwise_check_on_small_tensor(f64):
    x = leaf(np.random.default_rng(5).standard_normal((2, 3)))
    errs = elementwise_errors(lambda: weighted_sum(T.exp(x) * x), x)
    assert errs.max() < TOL
