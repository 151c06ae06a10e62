"""Autodiff engine: forward semantics, backward vs central differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoinet import tensor as T
from hoinet.errors import EmptyInputError, GraphError, NumericError, ShapeError


def t64(data, requires_grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, shape, requires_grad=True):
    return T.Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(t64(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(42)
        a = rng.integers(-100, 100, size=(3, 4)).astype(np.float64)
        b = rng.integers(-100, 100, size=(4, 5)).astype(np.float64)
        want = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                for p in range(4):
                    want[i, j] += a[i, p] * b[p, j]
        got = T.matmul(t64(a), t64(b))
        np.testing.assert_array_equal(got.data, want)

    def test_permutation_case(self):
        got = T.matmul(t64([[1, 2], [3, 4]]), t64([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(got.data, [[2, 1], [4, 3]])

    def test_grad_of_sum(self):
        a = t64([[1.0, 1.0]], requires_grad=True)
        b = t64([[2.0], [3.0]])
        with T.Graph() as g:
            loss = T.reduce_sum(T.matmul(a, b))
            T.backward(loss, g)
        np.testing.assert_allclose(a.grad, [[2.0, 3.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 5))))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal((4, 2))
        got = T.matmul(t64(a), t64(b)).data
        for i in range(5):
            np.testing.assert_allclose(got[i], a[i] @ b)


class TestRowSoftmax:
    def test_symmetry(self):
        out = T.row_softmax(t64([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.row_softmax(t64([[np.log(2.0), 0.0]]))
        np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            T.row_softmax(t64([[np.inf, 0.0]]))

    def test_grad_of_row_sum_is_zero(self):
        x = t64([[0.3, -1.2, 2.0]], requires_grad=True)
        with T.Graph() as g:
            loss = T.reduce_sum(T.row_softmax(x))
            T.backward(loss, g)
        np.testing.assert_allclose(x.grad, np.zeros((1, 3)), atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, row):
        x = np.asarray([row], dtype=np.float64)
        y = T.row_softmax(t64(x)).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
        shifted = T.row_softmax(t64(x + 7.5)).data
        np.testing.assert_allclose(y, shifted, atol=1e-6)


class TestElementwise:
    def test_relu_definition(self):
        out = T.relu(t64([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_tanh_sigmoid_at_zero(self):
        assert T.tanh(t64(0.0)).item() == 0.0
        assert T.sigmoid(t64(0.0)).item() == 0.5

    def test_tanh_grad_at_zero(self):
        x = t64(0.0, requires_grad=True)
        err = T.grad_check(lambda: T.tanh(x), [x])
        assert err < 1e-8

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t64(np.ones((2, 3))), t64(np.ones((4, 5))))

    def test_mixed_dtype_rejected(self):
        a = T.Tensor(np.ones(3, dtype=np.float32))
        b = T.Tensor(np.ones(3, dtype=np.float64))
        with pytest.raises(ShapeError):
            T.add(a, b)


class TestBroadcastAdd:
    def test_vec_into_zero_matrix(self):
        out = T.broadcast_add(t64([1.0, 1.0]), t64(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, np.ones((2, 3)))

    def test_zero_vec_identity(self):
        m = np.arange(6, dtype=np.float64).reshape(2, 3)
        out = T.broadcast_add(t64(np.zeros(2)), t64(m))
        np.testing.assert_array_equal(out.data, m)

    def test_vec_grad_is_row_sum(self):
        v = t64([0.0, 0.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.reduce_sum(T.broadcast_add(v, t64(np.zeros((2, 3)))))
            T.backward(loss, g)
        np.testing.assert_allclose(v.grad, [3.0, 3.0])

    def test_leading_extent_mismatch(self):
        with pytest.raises(ShapeError):
            T.broadcast_add(t64(np.zeros(3)), t64(np.zeros((2, 4))))


class TestReduceMeanRows:
    def test_single_row(self):
        out = T.reduce_mean_rows(t64([[2.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [2.0, 4.0])

    def test_symmetry(self):
        out = T.reduce_mean_rows(t64([[0.0, 2.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [1.0, 1.0])

    def test_grad_uniform(self):
        x = t64(np.arange(6, dtype=np.float64).reshape(3, 2), requires_grad=True)
        with T.Graph() as g:
            T.backward(T.reduce_sum(T.reduce_mean_rows(x)), g)
        np.testing.assert_allclose(x.grad, np.full((3, 2), 1 / 3))

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            T.reduce_mean_rows(t64(np.zeros((0, 3))))


class TestConcatSlice:
    def test_single_part_identity(self):
        a = t64([[1.0, 2.0]])
        np.testing.assert_array_equal(T.concat([a], axis=0).data, a.data)

    def test_rows(self):
        out = T.concat([t64([1.0]), t64([2.0])], axis=0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_slice_inverts_concat(self):
        p = t64(np.arange(4, dtype=np.float64).reshape(2, 2))
        q = t64(np.arange(6, dtype=np.float64).reshape(2, 3))
        cat = T.concat([p, q], axis=1)
        back_p = T.slice_axis(cat, 1, 0, 2)
        back_q = T.slice_axis(cat, 1, 2, 5)
        np.testing.assert_array_equal(back_p.data, p.data)
        np.testing.assert_array_equal(back_q.data, q.data)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([t64(np.zeros((2, 2))), t64(np.zeros((3, 3)))], axis=0)


class TestBackward:
    def test_sum_of_weights_gives_ones(self):
        w = t64(np.zeros((2, 2)), requires_grad=True)
        with T.Graph() as g:
            T.backward(T.reduce_sum(w), g)
        np.testing.assert_array_equal(w.grad, np.ones((2, 2)))

    def test_nonscalar_root_rejected(self):
        w = t64(np.zeros(3), requires_grad=True)
        with T.Graph() as g:
            y = T.mul(w, w)
            with pytest.raises(ShapeError):
                T.backward(y, g)

    def test_second_backward_rejected(self):
        w = t64(1.0, requires_grad=True)
        with T.Graph() as g:
            loss = T.mul(w, w)
            loss2 = T.reduce_sum(loss)
            T.backward(loss2, g)
        with pytest.raises(GraphError):
            T.backward(loss2, g)

    def test_foreign_loss_rejected(self):
        w = t64(1.0, requires_grad=True)
        with T.Graph() as g:
            loss = T.reduce_sum(T.mul(w, w))
        with T.Graph() as g2:
            with pytest.raises(GraphError):
                T.backward(loss, g2)

    def test_fanout_accumulates(self):
        # y = x*x + x*x: both consumers must contribute
        x = t64(3.0, requires_grad=True)
        with T.Graph() as g:
            y = T.add(T.mul(x, x), T.mul(x, x))
            T.backward(T.reduce_sum(y), g)
        np.testing.assert_allclose(x.grad, 12.0)

    def test_no_graph_is_pure_forward(self):
        x = t64(2.0, requires_grad=True)
        y = T.mul(x, x)
        assert y.requires_grad is False
        with T.Graph():
            y2 = T.mul(x, x)
            assert y2.requires_grad is True


class TestGradCheckOracle:
    """Every differentiable op against central finite differences, 20+ seeds."""

    def test_sum_is_exact(self):
        x = t64(np.arange(5, dtype=np.float64), requires_grad=True)
        assert T.grad_check(lambda: T.reduce_sum(x), [x]) < 1e-10

    def test_softmax_rowsum_flat(self):
        x = t64([[0.1, -0.4, 0.7]], requires_grad=True)
        assert T.grad_check(lambda: T.reduce_sum(T.row_softmax(x)), [x]) < 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = rand64(rng, (3, 4))
        b = rand64(rng, (4, 2))
        v = rand64(rng, (3,))
        c = rand64(rng, (3, 2))

        def f():
            y = T.matmul(a, b)                      # [3,2]
            y = T.broadcast_add(v, y)               # [3,2]
            y = T.tanh(y)
            y = T.mul(y, c)
            y = T.row_softmax(y)
            y = T.reduce_mean_rows(y)               # [2]
            return T.reduce_sum(y)

        assert T.grad_check(f, [a, b, v, c]) < 1e-4

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "relu", "exp", "log", "sqrt", "square"])
    @pytest.mark.parametrize("seed", [0, 7, 13])
    def test_unary_ops(self, op, seed):
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((4, 3))
        if op in ("log", "sqrt"):
            raw = np.abs(raw) + 0.5
        if op == "relu":
            raw = raw + np.sign(raw) * 0.05  # keep away from the kink
        x = T.Tensor(raw, requires_grad=True)
        fn = getattr(T, op)
        assert T.grad_check(lambda: T.reduce_sum(fn(x)), [x]) < 1e-4

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_binary_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = rand64(rng, (2, 3))
        b = T.Tensor(np.abs(rng.standard_normal((2, 3))) + 0.5, requires_grad=True)

        def f():
            y = T.div(T.mul(T.add(a, b), T.sub(a, b)), b)
            return T.reduce_mean(y)

        assert T.grad_check(f, [a, b]) < 1e-4

    @pytest.mark.parametrize("seed", [0, 5])
    def test_structure_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = rand64(rng, (2, 3))
        b = rand64(rng, (2, 2))

        def f():
            cat = T.concat([a, b], axis=1)          # [2,5]
            s = T.slice_axis(cat, 1, 1, 4)          # [2,3]
            r = T.reshape(T.transpose_last2(s), (6,))
            return T.reduce_sum(T.square(r))

        assert T.grad_check(f, [a, b]) < 1e-4

    @pytest.mark.parametrize("seed", [0, 9])
    def test_logsumexp_and_gather(self, seed):
        rng = np.random.default_rng(seed)
        table = rand64(rng, (5, 4))
        ids = np.array([0, 3, 3, 1])

        def f():
            rows = T.gather_rows(table, ids)        # [4,4]
            lse = T.logsumexp_last(rows)            # [4]
            picked = T.take_index_last(rows, np.array([1, 0, 2, 3]))
            return T.reduce_sum(T.sub(lse, picked))

        assert T.grad_check(f, [table]) < 1e-4

    def test_nonfinite_evaluation_rejected(self):
        x = t64([-1.0], requires_grad=True)
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericError):
                T.grad_check(lambda: T.reduce_sum(T.log(x)), [x])


class TestDeterminism:
    def test_fixed_inputs_bit_identical(self):
        rng = np.random.default_rng(123)
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        y1 = T.row_softmax(T.matmul(T.Tensor(a), T.Tensor(b))).data
        y2 = T.row_softmax(T.matmul(T.Tensor(a), T.Tensor(b))).data
        assert np.array_equal(y1, y2)
