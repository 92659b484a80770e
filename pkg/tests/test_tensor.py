import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qadapt import tensor as T
from qadapt.tensor import Tensor, backward, constant, finite_difference_check


def rand(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) * scale


class TestForward:
    def test_softmax_uniform_logits(self):
        out = T.softmax(constant(np.zeros(4)))
        assert np.allclose(out.data, 0.25, atol=0)

    def test_softmax_rows_sum_to_one(self):
        out = T.softmax(constant(rand((5, 7), seed=1, scale=3.0)))
        assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        x = constant(rand((4, 6), seed=2, scale=2.0))
        a = T.log_softmax(x).data
        b = np.log(T.softmax(x).data)
        assert np.max(np.abs(a - b)) < 1e-10

    def test_masked_mean_single_row_identity(self):
        x = rand((5, 3), seed=3)
        mask = np.array([False, False, True, False, False])
        out = T.masked_mean(constant(x), mask)
        assert np.array_equal(out.data, x[2])

    def test_masked_mean_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            T.masked_mean(constant(np.ones((3, 2))), np.zeros(3, dtype=bool))

    def test_pairwise_sq_dist_hand_value(self):
        # 3^2 + 4^2 = 25
        d = T.pairwise_sq_dist(constant([[0.0, 0.0]]), constant([[3.0, 4.0]]))
        assert d.data[0, 0] == 25.0

    def test_shape_mismatch_reports_dimensions(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\)"):
            T.add(constant(np.ones((2, 3))), constant(np.ones((3, 2))))

    def test_log_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            T.log(constant([1.0, 0.0]))

    def test_matmul_inner_dim_check(self):
        with pytest.raises(T.ShapeError):
            T.matmul(constant(np.ones((2, 3))), constant(np.ones((4, 2))))

    def test_row_vector_broadcast(self):
        x = constant(np.ones((4, 3)))
        b = constant(np.array([1.0, 2.0, 3.0]))
        out = T.add(x, b)
        assert np.array_equal(out.data, np.ones((4, 3)) + np.array([1.0, 2.0, 3.0]))

    def test_inner_broadcast_rejected(self):
        with pytest.raises(T.ShapeError):
            T.mul(constant(np.ones((4, 1))), constant(np.ones((4, 3))))

    def test_determinism_bitwise(self):
        x = rand((6, 6), seed=9)
        a = T.softmax(T.matmul(constant(x), constant(x))).data
        b = T.softmax(T.matmul(constant(x), constant(x))).data
        assert np.array_equal(a, b)


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        backward(T.mul(x, x))
        assert x.grad == pytest.approx(6.0, abs=0)

    def test_sum_of_softmax_has_zero_gradient(self):
        x = Tensor(rand(5, seed=4), requires_grad=True)
        backward(T.softmax(x).sum())
        assert np.max(np.abs(x.grad)) < 1e-15

    def test_unused_leaf_gets_no_gradient(self):
        x = Tensor(rand(3, seed=5), requires_grad=True)
        y = Tensor(rand(3, seed=6), requires_grad=True)
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones(3))
        assert y.grad is None

    def test_cancelled_leaf_gets_exact_zero(self):
        x = Tensor(rand(3, seed=7), requires_grad=True)
        y = Tensor(rand(3, seed=8), requires_grad=True)
        backward((x + 0.0 * y).sum())
        assert np.array_equal(y.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(rand(3, seed=10), requires_grad=True)
        with pytest.raises(T.GraphError, match="scalar"):
            backward(x + x)

    def test_graph_consumed_once(self):
        x = Tensor(rand(3, seed=11), requires_grad=True)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(T.GraphError, match="consumed"):
            backward(loss)

    def test_shared_subgraph_consumed(self):
        x = Tensor(rand(3, seed=12), requires_grad=True)
        h = x * x
        l1 = h.sum()
        l2 = h.mean()
        backward(l1)
        with pytest.raises(T.GraphError, match="consumed"):
            backward(l2)

    def test_gradient_accumulates_across_backwards(self):
        x = Tensor(rand(3, seed=13), requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        assert np.array_equal(x.grad, 2.0 * np.ones(3))

    def test_diamond_graph_accumulates(self):
        # loss = sum(x*x + x*x) -> grad 4x
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        h = x * x
        backward((h + h).sum())
        assert np.allclose(x.grad, 4.0 * x.data, atol=0)


class TestFiniteDifference:
    def test_linear_function_exact(self):
        x = constant(rand(7, seed=20))
        err = finite_difference_check(lambda t: t.sum(), x)
        assert err < 1e-10

    def test_composite_three_layer(self):
        w1 = rand((4, 5), seed=21)
        w2 = rand((5, 3), seed=22)
        x = constant(rand((2, 4), seed=23))

        def f(t):
            h = T.relu(T.matmul(x, t))
            h = T.softmax(T.matmul(h, constant(w2)))
            return T.mul(h, h).sum()

        assert finite_difference_check(f, constant(w1)) < 1e-5

    def test_gaussian_kernel_term(self):
        y = constant(rand((3, 4), seed=24))

        def f(t):
            d = T.pairwise_sq_dist(t, y)
            return T.exp(T.mul(d, constant(-1.0))).sum()

        assert finite_difference_check(f, constant(rand((2, 4), seed=25))) < 1e-5

    def test_wrong_gradient_rule_is_caught(self):
        # forward 2x, backward claims 3: a corrupted vjp must show up
        def bad_double(t):
            return T._node(2.0 * t.data, (t,), lambda g: (3.0 * g,))

        x = constant(rand(4, seed=26))
        err = finite_difference_check(lambda t: bad_double(t).sum(), x)
        assert err > 1e-2

    def test_nonfinite_reports_coordinate(self):
        x = constant(np.array([1.0, 1e-6]))

        def f(t):
            return T.log(t).sum()

        with pytest.raises(T.NonFiniteError, match="coordinate 1"):
            finite_difference_check(f, x, step=1e-5)


# each entry: (aux shape, scalar-valued function of a [4 x 3] input and the aux)
OPS = {
    "add": ((4, 3), lambda t, aux: (t + aux).sum()),
    "sub": ((4, 3), lambda t, aux: (aux - t).mean()),
    "mul": ((4, 3), lambda t, aux: (t * aux * t).sum()),
    "matmul": ((3, 4), lambda t, aux: T.matmul(t, aux).sum()),
    "exp": ((4, 3), lambda t, aux: T.exp(t).sum()),
    "log": ((4, 3), lambda t, aux: T.log(T.exp(t)).mean()),
    "relu": ((4, 3), lambda t, aux: T.relu(t).sum()),
    "softmax": ((4, 3), lambda t, aux: T.mul(T.softmax(t), aux).sum()),
    "log_softmax": ((4, 3), lambda t, aux: T.mul(T.log_softmax(t), aux).sum()),
    "layer_norm": ((4, 3), lambda t, aux: T.mul(T.layer_norm(t), aux).sum()),
    "masked_mean": ((3,), lambda t, aux: T.mul(T.masked_mean(t, np.array([True, False, True, True])), aux).sum()),
    "pairwise_sq_dist": ((5, 3), lambda t, aux: T.exp(-1.0 * T.pairwise_sq_dist(t, aux)).sum()),
    "transpose": ((4, 4), lambda t, aux: T.matmul(T.transpose(t), aux).sum()),
    "stack_slice": ((3, 4), lambda t, aux: T.slice_cols(T.matmul(t, aux), 1, 3).sum()),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(7))
def test_gradcheck_per_op(op, seed):
    # spread: 14 ops x 7 seeds, plus 2 model-level checks, covers 100 seeded cases
    aux_shape, fn = OPS[op]
    x = constant(rand((4, 3), seed=100 + seed))
    aux = constant(rand(aux_shape, seed=200 + seed))
    err = finite_difference_check(lambda t: fn(t, aux), x)
    assert err < 1e-5, f"{op} seed={seed}: rel err {err:.3e}"


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=30, deadline=None)
def test_softmax_sums_property(seed):
    out = T.softmax(constant(rand((3, 5), seed=seed, scale=4.0)))
    assert np.all(np.abs(out.data.sum(axis=-1) - 1.0) < 1e-12)


@given(st.integers(min_value=0, max_value=10_000))
@settings(max_examples=20, deadline=None)
def test_embedding_gradient_scatters(seed):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 6, size=8)
    table = Tensor(rand((6, 3), seed=seed), requires_grad=True)
    backward(T.embedding(table, ids).sum())
    expected = np.zeros((6, 3))
    for i in ids:
        expected[i] += 1.0
    assert np.array_equal(table.grad, expected)
