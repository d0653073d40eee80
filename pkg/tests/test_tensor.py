import numpy as np
import pytest

import scvm.tensor as T
from scvm.tensor import NumericalError, Parameter, ShapeError, Tensor


def test_layer_norm_constant_row_maps_to_zero():
    x = Tensor([[5.0, 5.0, 5.0]])
    out = T.layer_norm(x)
    np.testing.assert_array_equal(out.data, np.zeros((1, 3), dtype=np.float32))


def test_layer_norm_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(0.0, 2.0, (8, 32)))
    out = T.layer_norm(x).data
    mu = out.mean(axis=-1)
    var = out.var(axis=-1)
    assert np.max(np.abs(mu)) < 1e-6
    assert np.max(np.abs(var - 1.0)) < 1e-5


def test_sigmoid_gate_bias_value():
    out = T.sigmoid(Tensor([-2.2]))
    assert abs(out.data[0] - 0.0998) < 1e-3


def test_pooling_values():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(T.max_pool(x).data, [3.0, 4.0])
    np.testing.assert_allclose(T.mean_pool(x).data, [2.0, 3.0])


def test_max_pool_tie_routes_to_first_index():
    x = Tensor([[2.0], [2.0], [1.0]], requires_grad=True)
    out = T.reduce_sum(T.max_pool(x))
    out.backward()
    np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])


def test_sum_backward_is_all_ones():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4), requires_grad=True)
    T.reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_cosine_self_alignment_is_stationary():
    v = Tensor([0.3, -1.2, 0.7, 2.0], requires_grad=True)
    loss = 1.0 - T.cosine_similarity(v, v)
    loss.backward()
    assert abs(loss.item()) < 1e-6
    assert np.max(np.abs(v.grad)) < 1e-6


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    out = T.softmax(Tensor(rng.normal(0.0, 3.0, (10, 7)))).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(10), atol=1e-6)


def test_backward_rejects_non_scalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        (x * 2.0).backward()


def test_shape_error_names_op_and_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        T.add(a, b)
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        T.matmul(a, b)


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros((2, 2)))
    with T.precision("float64"):
        b = Tensor(np.zeros((2, 2)))
    with pytest.raises(ShapeError, match="dtype"):
        T.add(a, b)


def test_verification_mode_rejects_non_finite():
    with T.precision("float64"):
        bad = Tensor([np.nan, 1.0])
        good = Tensor([1.0, 2.0])
        with pytest.raises(NumericalError, match="add"):
            T.add(bad, good)
    # training mode stays permissive for speed
    out = T.add(Tensor([np.inf]), Tensor([1.0]))
    assert np.isinf(out.data[0])


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 12)))
    loss = T.cross_entropy(logits, np.array([0, 5, 11]))
    assert abs(loss.item() - np.log(12.0)) < 1e-6


def test_cross_entropy_rejects_bad_ids():
    logits = Tensor(np.zeros((2, 4)))
    with pytest.raises(ShapeError, match="out of range"):
        T.cross_entropy(logits, np.array([0, 4]))


def test_broadcast_add_gradient_reduces():
    x = Tensor(np.ones((2, 5, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    T.reduce_sum(x + b).backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 10.0, dtype=np.float32))
    np.testing.assert_array_equal(x.grad, np.ones((2, 5, 4), dtype=np.float32))


def test_matmul_matches_numpy():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(2, 3, 4)).astype(np.float32)
    w = rng.normal(size=(4, 5)).astype(np.float32)
    out = T.matmul(Tensor(a), Tensor(w))
    np.testing.assert_allclose(out.data, a @ w, rtol=1e-6)
    v = rng.normal(size=4).astype(np.float32)
    out2 = T.matmul(Tensor(v), Tensor(w))
    np.testing.assert_allclose(out2.data, v @ w, rtol=1e-6)


def test_concat_and_slice_roundtrip_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    joined = T.concat([a, b], axis=-1)
    T.reduce_sum(T.slice_axis(joined, -1, 3, 5)).backward()
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3), dtype=np.float32))
    np.testing.assert_array_equal(b.grad, np.ones((2, 2), dtype=np.float32))


def test_duplicate_input_accumulates():
    x = Tensor([2.0, 3.0], requires_grad=True)
    T.reduce_sum(x * x).backward()
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_forward_deterministic_same_inputs():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        loss = T.reduce_sum(T.tanh(x @ w) * T.sigmoid(x))
        loss.backward()
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.tanh(x)
    assert not out.requires_grad
    assert T.graph_size(out) == 1


def test_composed_graph_matches_finite_differences():
    from scvm.gradcheck import grad_check

    with T.precision("float64"):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 6)), requires_grad=True)

        def f():
            h = T.layer_norm(T.tanh(x @ w))
            return T.reduce_sum(T.softmax(h) * x)

        assert grad_check(f, [x, w]) < 1e-4


def test_parameter_names_and_flags():
    p = Parameter("block.w", np.zeros((2, 2)), frozen=True, decay=True)
    assert p.name == "block.w"
    assert p.frozen and p.decay
    assert p.tensor.requires_grad
