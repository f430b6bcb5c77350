import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gesturestream import tensor as T
from gesturestream.exceptions import ConfigError, NumericError, ShapeError
from gesturestream.tensor import Tape, Tensor


def finite_floats(shape):
    return arrays(np.float64, shape, elements=st.floats(-3, 3, allow_nan=False, width=64))


class TestPrimitivesForward:
    def test_matmul_matches_numpy(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        assert np.allclose(T.matmul(a, b).data, a @ b)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_broadcast_error(self):
        with pytest.raises(ShapeError):
            T.add(np.ones((2, 3)), np.ones((4,)))

    def test_softmax_rows_sum_to_one(self, rng):
        p = T.softmax(rng.normal(size=(5, 7)) * 50, axis=-1).data
        assert np.allclose(p.sum(axis=-1), 1.0)

    def test_softmax_mask_zeroes_hidden_entries(self, rng):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        p = T.softmax(rng.normal(size=(4, 4)), mask=mask).data
        assert np.all(p[~mask] == 0.0)
        assert np.allclose(p.sum(axis=-1), 1.0)

    def test_layer_norm_statistics(self, rng):
        y = T.layer_norm(rng.normal(3.0, 5.0, size=(6, 16))).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_cross_entropy_uniform_is_log_k(self):
        loss = T.cross_entropy(np.zeros((3, 19)), [0, 5, 18]).item()
        assert loss == pytest.approx(np.log(19))

    def test_dropout_identity_when_not_training(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert T.dropout(x, 0.5, train=False) is x

    def test_dropout_preserves_expectation(self):
        y = T.dropout(np.ones(200_000), 0.3, train=True, rng=0).data
        assert y.mean() == pytest.approx(1.0, abs=0.01)
        assert np.allclose(np.unique(y), [0.0, 1 / 0.7])

    def test_apply_dispatch(self, rng):
        a = rng.normal(size=(2, 2))
        assert np.allclose(T.apply("relu", a).data, np.maximum(a, 0))
        with pytest.raises(ConfigError):
            T.apply("nope", a)


# (name, function of one tensor, input shape)
CASES = [
    ("add", lambda x: T.sum_(T.add(x, T.mul(x, x))), (3, 4)),
    ("sub_broadcast", lambda x: T.sum_(T.mul(T.sub(x, T.mean(x, axis=0)), x)), (3, 4)),
    ("matmul", lambda x: T.sum_(T.mul(T.matmul(x, T.transpose(x)), T.matmul(x, T.transpose(x)))), (3, 4)),
    ("batched_matmul", lambda x: T.sum_(T.matmul(x, T.transpose(x, (0, 2, 1)))), (2, 3, 4)),
    ("linear", lambda x: T.sum_(T.relu(T.linear(x, T.transpose(x), T.sum_(x, axis=1)))), (4, 3)),
    ("relu", lambda x: T.sum_(T.mul(T.relu(x), x)), (5,)),
    ("softmax", lambda x: T.sum_(T.mul(T.softmax(x, axis=-1), x)), (3, 5)),
    ("masked_softmax", lambda x: T.sum_(T.mul(T.softmax(x, mask=np.tril(np.ones((4, 4), bool))), x)), (4, 4)),
    ("layer_norm", lambda x: T.sum_(T.mul(T.layer_norm(x, np.arange(1.0, 7.0), np.ones(6)), x)), (3, 6)),
    ("concat_stack", lambda x: T.sum_(T.mul(T.concat([x, x], axis=1), T.stack([x, x], axis=1).reshape((3, 8)))), (3, 4)),
    ("reshape_transpose", lambda x: T.sum_(T.mul(T.reshape(T.transpose(x), (2, 6)), T.reshape(x, (2, 6)))), (3, 4)),
    ("mean", lambda x: T.sum_(T.mul(T.mean(x, axis=(0, 1), keepdims=True), x)), (2, 3, 2)),
    ("abs", lambda x: T.sum_(T.abs_(x)), (6,)),
    ("cross_entropy", lambda x: T.cross_entropy(x, [0, 2, 1]), (3, 4)),
    ("nll", lambda x: T.nll(T.softmax(x), [1, 1, 3]), (3, 4)),
    ("scale_neg_div", lambda x: T.sum_(T.mul(-x / 3.0, x)), (2, 2)),
]


class TestGradients:
    @pytest.mark.parametrize("name, fn, shape", CASES, ids=[c[0] for c in CASES])
    def test_finite_differences(self, name, fn, shape):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        point = rng.normal(size=shape)
        point[np.abs(point) < 1e-3] = 0.5  # keep relu/abs away from their kinks
        assert T.grad_check(fn, point) < 1e-6

    @given(finite_floats((3, 4)))
    def test_softmax_gradient_property(self, x):
        assert T.grad_check(lambda t: T.sum_(T.mul(T.softmax(t), t)), x) < 1e-5

    def test_dropout_gradient_with_fixed_mask(self, rng):
        point = rng.normal(size=(4, 5))
        fn = lambda t: T.sum_(T.mul(T.dropout(t, 0.4, True, rng=7), t))
        assert T.grad_check(fn, point) < 1e-6

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            y = T.sum_(T.add(T.mul(x, x), x))
        grads = tape.backward(y)
        assert grads[x][0] == pytest.approx(5.0)
        assert x.grad[0] == pytest.approx(5.0)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape, T.no_grad():
            T.mul(x, x)
        assert len(tape) == 0

    def test_grad_check_rejects_bad_eps(self):
        with pytest.raises(ConfigError):
            T.grad_check(lambda t: T.sum_(t), np.ones(2), eps=1e-2)

    def test_grad_check_detects_a_wrong_vjp(self):
        def bad(x):
            x = T.as_tensor(x)
            return T._result("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # should be 2x
        assert T.grad_check(lambda t: T.sum_(bad(t)), np.array([1.0, 2.0])) > 0.4


class TestGuardAndCounter:
    def test_numeric_guard_raises(self):
        with pytest.raises(NumericError, match="scale"), np.errstate(over="ignore"):
            T.scale(np.array([1e308]), 1e10)

    def test_numeric_guard_can_be_disabled(self):
        with T.numeric_guard(False), np.errstate(over="ignore"):
            assert np.isinf(T.scale(np.array([1e308]), 1e10).data[0])

    def test_flop_counter_counts_matmul_macs(self):
        with T.counting() as c:
            T.matmul(np.ones((2, 3, 4)), np.ones((4, 5)), tag="x")
            T.linear(np.ones((7, 4)), np.ones((4, 2)))
            T.np_matmul(np.ones(4), np.ones((4, 3)), tag="y")
        assert c["x"] == 2 * 3 * 4 * 5
        assert c["y"] == 4 * 3
        assert c.total == 120 + 7 * 4 * 2 + 12

    def test_counting_is_scoped(self):
        with T.counting() as outer:
            T.matmul(np.ones((2, 2)), np.ones((2, 2)))
            with T.counting() as inner:
                T.matmul(np.ones((3, 3)), np.ones((3, 3)))
        assert outer.total == 8 and inner.total == 27


class TestXavier:
    def test_bound_and_variance(self):
        w = T.xavier_uniform((128, 128), np.random.default_rng(0))
        bound = np.sqrt(6 / 256)
        assert np.abs(w).max() <= bound
        assert w.var() == pytest.approx(2 / 256, rel=0.2)


class TestWorkedExamples:
    def test_softmax_of_zeros(self):
        assert np.allclose(T.softmax(np.zeros(3)).data, 1 / 3)

    def test_identity_matmul(self, rng):
        x = rng.normal(size=(3, 4))
        assert np.array_equal(T.matmul(np.eye(3), x).data, x)

    def test_layer_norm_of_small_vector(self):
        y = T.layer_norm(np.array([1.0, 2.0, 3.0])).data
        # variance 2/3 shrinks slightly through eps
        assert y.mean() == pytest.approx(0.0, abs=1e-12)
        assert y.var() == pytest.approx((2 / 3) / (2 / 3 + 1e-5))

    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            y = T.sum_(x)
        assert np.array_equal(tape.backward(y)[x], np.ones((2, 3)))

    def test_half_square_gradient_is_identity(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        with Tape() as tape:
            y = T.scale(T.sum_(T.mul(x, x)), 0.5)
        assert np.allclose(tape.backward(y)[x], x.data)

    def test_linear_map_is_exact(self, rng):
        w = rng.normal(size=(4, 2))
        assert T.grad_check(lambda t: T.sum_(T.matmul(t, w)), rng.normal(size=(3, 4))) <= 1e-9

    def test_softmax_matmul_composite(self, rng):
        w = rng.normal(size=(4, 5))
        fn = lambda t: T.sum_(T.mul(T.softmax(T.matmul(t, w)), np.arange(5.0)))
        assert T.grad_check(fn, rng.normal(size=(3, 4)), eps=1e-5) <= 1e-4

    def test_eval_dropout_is_identity_path(self, rng):
        x = rng.normal(size=(3, 3))
        assert np.array_equal(T.relu(T.dropout(x, 0.5, train=False)).data, T.relu(x).data)

    def test_empty_softmax_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(np.zeros((2, 0)))
