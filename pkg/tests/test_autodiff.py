import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tandemnet import ops
from tandemnet.errors import DimensionError, NumericError
from tandemnet.gradcheck import grad_check, relative_error
from tandemnet.tensor import Tensor, fresh_tape, no_grad, set_default_dtype


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    out = ops.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_arithmetic():
    out = ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_gradient(rng):
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.matmul(a, b))), [a, b]) < 1e-6


def test_batched_matmul_gradient(rng):
    w, x = param(rng, 3, 4), param(rng, 2, 4, 5)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.matmul(w, x))), [w, x]) < 1e-6


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(DimensionError, match="inner"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# elementwise


def test_tanh_zero():
    assert ops.tanh(Tensor([0.0])).data[0] == 0.0


def test_add_values():
    np.testing.assert_array_equal(ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_tanh_gradient_17_points(rng):
    x = param(rng, 17)
    assert grad_check(lambda: ops.sum(ops.tanh(x)), [x]) < 1e-6


def test_elementwise_dispatch_and_bad_shapes():
    np.testing.assert_array_equal(ops.elementwise("mul", Tensor([2.0]), Tensor([3.0])).data, [6.0])
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ValueError):
        ops.elementwise("pow", Tensor([1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    x, y = param(rng, 3, 4), param(rng, 3, 4)
    col = param(rng, 3, 1)
    cases = {
        "add": (lambda: ops.sum(ops.tanh(ops.add(x, col))), [x, col]),
        "sub": (lambda: ops.sum(ops.tanh(ops.sub(x, y))), [x, y]),
        "mul": (lambda: ops.sum(ops.mul(x, y)), [x, y]),
        "scale": (lambda: ops.sum(ops.tanh(ops.scale(x, -1.7))), [x]),
        "sigmoid": (lambda: ops.sum(ops.mul(ops.sigmoid(x), y)), [x]),
        "relu": (lambda: ops.sum(ops.mul(ops.relu(ops.add(x, Tensor(np.full((3, 4), 0.05)))), y)), [x]),
        "mean": (lambda: ops.sum(ops.tanh(ops.mean(x, axis=0))), [x]),
        "softmax": (lambda: ops.sum(ops.mul(ops.softmax(x), y)), [x]),
        "log_softmax": (lambda: ops.sum(ops.mul(ops.log_softmax(x), y)), [x]),
        "cross_entropy": (lambda: ops.cross_entropy(x, np.array([0, 3, 1])), [x]),
        "weighted_ce": (lambda: ops.cross_entropy(x, np.array([0, 3, 1]), np.array([1.0, 0.0, 2.0])), [x]),
        "transpose": (lambda: ops.sum(ops.mul(ops.transpose(x), ops.transpose(y))), [x]),
        "reshape": (lambda: ops.sum(ops.tanh(ops.reshape(x, (4, 3)))), [x]),
        "concat": (lambda: ops.sum(ops.tanh(ops.concat_cols(x, col))), [x, col]),
        "stack": (lambda: ops.sum(ops.tanh(ops.stack([x, y], axis=1))), [x, y]),
        "index": (lambda: ops.sum(ops.tanh(ops.index(x, (slice(None), np.array([0, 0, 2]))))), [x]),
        "gap": (lambda: ops.sum(ops.tanh(ops.global_avg_pool(x))), [x]),
    }
    for name, (f, params) in cases.items():
        assert grad_check(f, params) < 1e-4, name


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    np.testing.assert_array_equal(ops.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_large_logits_do_not_overflow():
    out = ops.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_nan_input_raises():
    with pytest.raises(NumericError):
        ops.softmax(Tensor([0.0, np.nan]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(e, k):
    a = ops.softmax(Tensor(e)).data
    b = ops.softmax(Tensor(e + k)).data
    assert abs(a.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


# ---------------------------------------------------------------------------
# pooling and concat


def test_gap_values():
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor([[2.0, 4.0]])).data, [3.0])


def test_gap_single_column_is_identity():
    col = np.array([[1.5], [-2.0], [0.25]])
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(col)).data, col[:, 0])


def test_gap_gradient_4x7(rng):
    x = param(rng, 4, 7)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.global_avg_pool(x))), [x]) < 1e-6


def test_gap_rejects_empty():
    with pytest.raises(DimensionError):
        ops.global_avg_pool(Tensor(np.zeros((3, 0))))


def test_concat_values():
    np.testing.assert_array_equal(ops.concat_cols(Tensor([[1.0]]), Tensor([[2.0]])).data, [[1.0, 2.0]])


def test_concat_with_empty_is_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ops.concat_cols(Tensor(x), Tensor(np.zeros((3, 0)))).data, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 9), st.data())
def test_split_concat_round_trip(rows, cols, data):
    x = np.random.default_rng(rows * 31 + cols).normal(size=(rows, cols))
    cut = data.draw(st.integers(0, cols))
    out = ops.concat_cols(ops.index(Tensor(x), (slice(None), slice(0, cut))),
                          ops.index(Tensor(x), (slice(None), slice(cut, None))))
    assert np.array_equal(out.data, x)


# ---------------------------------------------------------------------------
# conv / dropout / batch norm


def test_identity_1x1_conv(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv2d_gradient(rng):
    x, w, b = param(rng, 1, 3, 5, 5), param(rng, 2, 3, 3, 3), param(rng, 2)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.conv2d(x, w, b, stride=1, padding=1))), [x, w, b]) < 1e-5


def test_strided_conv2d_gradient(rng):
    x, w = param(rng, 2, 2, 6, 6), param(rng, 3, 2, 3, 3)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.conv2d(x, w, stride=2, padding=1))), [x, w]) < 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_avg_pool_gradient(rng):
    x = param(rng, 1, 2, 4, 4)
    assert grad_check(lambda: ops.sum(ops.tanh(ops.avg_pool2d(x, 2))), [x]) < 1e-6


def test_dropout_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    assert ops.dropout(x, 0.0, rng, training=True) is x
    assert ops.dropout(x, 0.7, rng, training=False) is x


def test_dropout_expected_value_matches_input():
    rng = np.random.default_rng(0)
    x = np.array([0.5, -1.0, 2.0, 3.0])
    draws = np.stack([ops.dropout(Tensor(x), 0.3, rng, training=True).data for _ in range(100_000)])
    np.testing.assert_allclose(draws.mean(axis=0), x, rtol=0.02)


def test_batch_norm_gradient_train_mode(rng):
    x, gamma, beta = param(rng, 3, 2, 3, 3), param(rng, 2), param(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)
    f = lambda: ops.sum(ops.mul(ops.batch_norm(x, gamma, beta, rm, rv, True), Tensor(np.linspace(-1, 1, 54).reshape(3, 2, 3, 3))))  # noqa: E731
    assert grad_check(f, [x, gamma, beta]) < 1e-4


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.normal(size=(2, 2, 2, 2))
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.array([1.0, -1.0]),
                         np.array([4.0, 1.0]), training=False, eps=0.0)
    np.testing.assert_allclose(out.data[:, 0], (x[:, 0] - 1.0) / 2.0)
    np.testing.assert_allclose(out.data[:, 1], x[:, 1] + 1.0)


# ---------------------------------------------------------------------------
# tape behaviour and grad_check itself


def test_grad_check_quadratic(rng):
    x = param(rng, 6)
    assert grad_check(lambda: ops.sum(ops.mul(x, x)), [x]) < 1e-9


def test_constant_function_has_exact_zero_gradient(rng):
    x = param(rng, 3)
    with fresh_tape() as tape:
        out = ops.add(ops.scale(ops.sum(x), 0.0), Tensor(5.0))
        tape.backward(out)
    assert np.array_equal(x.grad, np.zeros(3))


def test_diamond_graph_accumulates_both_paths(rng):
    # x feeds two consumers that are joined again downstream
    x = param(rng, 4)

    def f():
        a = ops.tanh(x)
        b = ops.mul(x, x)
        return ops.sum(ops.mul(a, b))

    assert grad_check(f, [x]) < 1e-6
    x.zero_grad()
    with fresh_tape() as tape:
        tape.backward(f())
    t = np.tanh(x.data)
    expected = (1 - t ** 2) * x.data ** 2 + t * 2 * x.data
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_leaf_gradients_accumulate_across_backward_calls(rng):
    x = param(rng, 3)
    for _ in range(2):
        with fresh_tape() as tape:
            tape.backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_no_grad_records_nothing(rng):
    x = param(rng, 3)
    with fresh_tape() as tape:
        with no_grad():
            ops.tanh(x)
        assert len(tape) == 0


def test_nonfinite_gradient_raises():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with fresh_tape() as tape:
        with pytest.raises(NumericError):
            tape.backward(ops.sum(x), grad=np.array(np.inf))


def test_operator_sugar(rng):
    a, b = param(rng, 2, 2), param(rng, 2, 2)
    assert grad_check(lambda: ops.sum((a @ b - a) * b + (-a)), [a, b]) < 1e-6


def test_relative_error_floor():
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-6)
    assert relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_float32_mode_round_trips():
    # non-float input takes the default dtype; float arrays keep theirs
    set_default_dtype("float32")
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
    set_default_dtype("float64")
    assert Tensor([1]).dtype == np.float64
    with pytest.raises(ValueError):
        set_default_dtype("float16")
