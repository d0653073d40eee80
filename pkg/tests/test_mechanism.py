import numpy as np
import pytest

import scvm.tensor as T
from scvm.mechanism import (
    GATE_BIAS_INIT,
    LayerSummarizer,
    MemoryCell,
    ScvmSettings,
    TextProjector,
    TokenGate,
)
from scvm.tensor import NumericalError, ShapeError, Tensor

D = 8


def make_cell(seed=0, dim=D):
    return MemoryCell(dim, dim // 4, np.random.default_rng(seed), "t.tmsu")


def test_summary_of_constant_tokens():
    summ = LayerSummarizer(D, np.random.default_rng(0), "t.sum")
    v = np.arange(D, dtype=np.float32)
    x = Tensor(np.tile(v, (5, 1))[None])
    s = summ(x)
    np.testing.assert_allclose(s.mu.data[0], v, rtol=1e-6)
    np.testing.assert_allclose(s.nu.data[0], v, rtol=1e-6)
    np.testing.assert_allclose(s.cls.data[0], v, rtol=1e-6)


def test_block_identity_projection_returns_mean():
    summ = LayerSummarizer(D, np.random.default_rng(1), "t.sum")
    w = np.zeros((3 * D, D), dtype=np.float32)
    w[:D] = np.eye(D)  # [I | 0 | 0] block: y picks out the mean view
    summ.w.tensor.data = w
    x = Tensor(np.random.default_rng(2).normal(size=(2, 5, D)).astype(np.float32))
    s = summ(x)
    np.testing.assert_allclose(s.y.data, s.mu.data, atol=1e-6)


def test_summary_rejects_empty_grid():
    summ = LayerSummarizer(D, np.random.default_rng(3), "t.sum")
    with pytest.raises(ShapeError, match="token"):
        summ(Tensor(np.zeros((1, 0, D))))


def test_project_text_single_token_and_zero_weights():
    proj = TextProjector(D, D, np.random.default_rng(4), "t.text")
    row = np.random.default_rng(5).normal(size=(1, 1, D)).astype(np.float32)
    out = proj(Tensor(row))
    expect = row[0, 0] @ proj.w.data
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-5)

    proj.w.tensor.data[:] = 0.0
    np.testing.assert_array_equal(proj(Tensor(row)).data, np.zeros((1, D), dtype=np.float32))


def test_project_text_rejects_empty_question():
    proj = TextProjector(D, D, np.random.default_rng(6), "t.text")
    with pytest.raises(ShapeError, match="question"):
        proj(Tensor(np.zeros((1, 0, D))))


def test_memory_update_closed_form_under_zero_drive():
    # s = 0 at the prescribed init: f = sigmoid(1), i = 0.5, candidate = 0
    cell = make_cell()
    cell.w1.tensor.data[:] = 0.0
    rng = np.random.default_rng(7)
    c_prev = Tensor(rng.uniform(-1, 1, (3, D)).astype(np.float32))
    y = Tensor(rng.normal(size=(3, D)).astype(np.float32))
    t = Tensor(rng.normal(size=(3, D)).astype(np.float32))
    c_new, f, i, c_tilde = cell(y, t, c_prev)
    np.testing.assert_allclose(f.data, np.full((3, D), 0.7311), atol=1e-3)
    np.testing.assert_allclose(i.data, np.full((3, D), 0.5), atol=1e-6)
    np.testing.assert_array_equal(c_tilde.data, np.zeros((3, D), dtype=np.float32))
    np.testing.assert_allclose(c_new.data, 0.7311 * c_prev.data, atol=1e-3)


def test_saturated_gates_preserve_memory():
    cell = make_cell()
    cell.w1.tensor.data[:] = 0.0
    cell.bf.tensor.data[:] = 20.0
    cell.bi.tensor.data[:] = -20.0
    rng = np.random.default_rng(8)
    c_prev = Tensor(rng.uniform(-1, 1, (2, D)).astype(np.float32))
    y = Tensor(np.zeros((2, D)))
    t = Tensor(np.zeros((2, D)))
    c_new, _, _, _ = cell(y, t, c_prev)
    np.testing.assert_allclose(c_new.data, c_prev.data, atol=1e-6)


def test_memory_update_rejects_bad_dims_and_nonfinite():
    cell = make_cell()
    good = Tensor(np.zeros((1, D)))
    with pytest.raises(ShapeError, match="tmsu_update"):
        cell(Tensor(np.zeros((1, D + 1))), good, good)
    bad_prev = Tensor(np.full((1, D), np.inf))
    with pytest.raises(NumericalError, match="layer 3"):
        cell(good, good, bad_prev, layer=3)


def test_memory_norm_growth_bound():
    rng = np.random.default_rng(9)
    for trial in range(20):
        cell = make_cell(seed=trial)
        c = Tensor(rng.uniform(-2, 2, (4, D)).astype(np.float32))
        for layer in range(6):
            y = Tensor(rng.normal(size=(4, D)).astype(np.float32))
            t = Tensor(rng.normal(size=(4, D)).astype(np.float32))
            c_new, _, _, _ = cell(y, t, c, layer=layer)
            assert np.max(np.abs(c_new.data)) < np.max(np.abs(c.data)) + 1.0
            c = c_new


def test_gate_is_exact_identity_at_init():
    gate = TokenGate(D, np.random.default_rng(10), "t.tag")
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(2, 5, D)).astype(np.float32))
    c = Tensor(rng.normal(size=(2, D)).astype(np.float32))
    x_hat, alpha, delta = gate(x, c)
    assert x_hat.data.tobytes() == x.data.tobytes()
    np.testing.assert_array_equal(delta.data, np.zeros_like(delta.data))


def test_gate_alpha_is_one_tenth_with_zero_weights():
    gate = TokenGate(D, np.random.default_rng(12), "t.tag")
    gate.w_gate.tensor.data[:] = 0.0
    assert gate.b_gate.data[0] == np.float32(GATE_BIAS_INIT)
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(1, 7, D)).astype(np.float32))
    c = Tensor(rng.normal(size=(1, D)).astype(np.float32))
    _, alpha, _ = gate(x, c)
    np.testing.assert_allclose(alpha.data, np.full((1, 7, 1), 0.0998), atol=1e-3)


def test_gate_correction_is_strictly_bounded():
    rng = np.random.default_rng(14)
    for trial in range(20):
        gate = TokenGate(D, np.random.default_rng(100 + trial), "t.tag")
        # push the gate well away from its near-identity init
        gate.w1.tensor.data = rng.normal(0, 1.0, (D, D)).astype(np.float32)
        gate.w2.tensor.data = rng.normal(0, 1.0, (D, D)).astype(np.float32)
        gate.w_gate.tensor.data = rng.normal(0, 1.0, (D, 1)).astype(np.float32)
        x = Tensor(rng.normal(0, 3.0, (2, 5, D)).astype(np.float32))
        c = Tensor(rng.normal(0, 3.0, (2, D)).astype(np.float32))
        x_hat, alpha, delta = gate(x, c)
        assert np.max(np.abs(x_hat.data - x.data)) < 1.0
        assert np.all(alpha.data > 0.0) and np.all(alpha.data < 1.0)
        assert np.all(np.abs(delta.data) <= 1.0)


def test_gate_rejects_dim_mismatch():
    gate = TokenGate(D, np.random.default_rng(15), "t.tag")
    with pytest.raises(ShapeError, match="tag_modulate"):
        gate(Tensor(np.zeros((1, 5, D + 2))), Tensor(np.zeros((1, D))))


def test_settings_reduced_dim():
    s = ScvmSettings(reduction=4)
    assert s.reduced_dim(32) == 8
    with pytest.raises(ValueError, match="divisible"):
        s.reduced_dim(30)
