import numpy as np
import pytest

from shakedrop import ops
from shakedrop.autograd import GraphError, Parameter, Tensor, backward, no_grad


class TestTensor:
    def test_shape_and_size_agree_with_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        assert t.ndim == 3

    def test_zero_sized_dimension_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((2, 0)))

    def test_integer_data_promoted_to_float(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_float32_kept(self):
        assert Tensor(np.ones(3, np.float32)).dtype == np.float32

    def test_operators_build_graph(self):
        a = Parameter([1.0, 2.0])
        b = Parameter([3.0, 4.0])
        backward(((a * b) + a - b).sum())
        np.testing.assert_array_equal(a.grad, [4.0, 5.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    def test_detach_cuts_graph(self):
        a = Parameter([1.0])
        d = (a * 2.0).detach()
        assert d.node is None and not d.requires_grad


class TestParameter:
    def test_gradient_starts_at_zero_with_matching_shape(self):
        p = Parameter(np.ones((3, 2)))
        assert p.grad.shape == p.shape
        assert not p.grad.any()

    def test_zero_grad_after_backward(self):
        p = Parameter([1.0, 2.0])
        backward((p * p).sum())
        p.zero_grad()
        assert not p.grad.any()

    def test_value_is_copied(self):
        src = np.ones(3)
        p = Parameter(src)
        src[0] = 5.0
        assert p.data[0] == 1.0

    def test_astype_resets_gradient(self):
        p = Parameter(np.ones(2))
        backward(p.sum())
        p.astype(np.float32)
        assert p.dtype == np.float32 and p.grad.dtype == np.float32 and not p.grad.any()


class TestBackward:
    def test_sum_gives_all_ones(self):
        x = Parameter(np.arange(6.0).reshape(2, 3))
        backward(ops.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares_hand_calculus(self):
        x = Parameter([1.0, 2.0])
        backward(ops.sum_all(ops.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Parameter([1.0, 2.0])
        with pytest.raises(GraphError):
            backward(ops.mul(x, x))

    def test_second_backward_on_same_graph_rejected(self):
        x = Parameter([1.0, 2.0])
        loss = ops.sum_all(ops.mul(x, x))
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)

    def test_fresh_forward_allows_new_backward_and_accumulates(self):
        x = Parameter([1.0, 2.0])
        backward(ops.sum_all(x))
        backward(ops.sum_all(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_unreached_parameter_keeps_zero_gradient(self):
        used, unused = Parameter([1.0]), Parameter([7.0])
        backward(ops.sum_all(ops.mul(used, used)))
        assert unused.grad.tolist() == [0.0]

    def test_shared_subexpression_visited_once(self):
        x = Parameter([3.0])
        y = ops.mul(x, x)
        backward(ops.sum_all(ops.add(y, y)))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_deep_chain_has_no_recursion_limit(self):
        x = Parameter([1.0])
        y = x
        for _ in range(5000):
            y = ops.add(y, 0.0)
        backward(ops.sum_all(y))
        assert x.grad[0] == 1.0

    def test_gradient_dtype_follows_parameter(self):
        x = Parameter(np.ones(3), dtype=np.float32)
        backward(ops.sum_all(ops.mul(x, np.full(3, 2.0))))
        assert x.grad.dtype == np.float32

    def test_no_grad_records_nothing(self):
        x = Parameter([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert y.node is None and not y.requires_grad


class TestForwardPurity:
    def test_repeated_forward_bitwise_identical(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        a = ops.relu(ops.conv2d(x, w, 1, 1)).data
        b = ops.relu(ops.conv2d(x, w, 1, 1)).data
        assert np.array_equal(a, b)
