import numpy as np
import pytest

import scvm.tensor as T
from scvm.optim import AdamW, cosine_lr
from scvm.tensor import NumericalError, Parameter, Tensor


def test_first_step_closed_form():
    p = Parameter("w", np.array([1.0, -2.0, 0.5]), decay=False)
    g = np.array([0.3, -0.7, 0.01], dtype=np.float32)
    p.tensor.grad = g.copy()
    opt = AdamW([p], weight_decay=0.0)
    before = p.data.copy()
    opt.step(lr=1e-2)
    expect = before - 1e-2 * g / (np.abs(g) + opt.eps)
    np.testing.assert_allclose(p.data, expect, rtol=1e-5)


def test_frozen_parameter_keeps_exact_bits():
    p = Parameter("w", np.array([1.0, 2.0]), frozen=True)
    p.tensor.grad = np.array([5.0, 5.0], dtype=np.float32)
    before = p.data.tobytes()
    AdamW([p]).step(lr=1.0)
    assert p.data.tobytes() == before


def test_missing_gradient_is_skipped():
    p = Parameter("w", np.array([1.0]))
    before = p.data.copy()
    AdamW([p]).step(lr=1.0)
    np.testing.assert_array_equal(p.data, before)


def test_non_finite_gradient_names_parameter():
    p = Parameter("block.fc.w", np.array([1.0]))
    p.tensor.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericalError, match="block.fc.w"):
        AdamW([p]).step(lr=1e-3)


def test_quadratic_bowl_decreases_monotonically():
    target = np.array([0.5, -1.5, 2.0], dtype=np.float32)
    p = Parameter("x", np.array([3.0, 3.0, -3.0]))
    opt = AdamW([p], weight_decay=0.0)
    losses = []
    for _ in range(10):
        p.tensor.grad = None
        diff = p.tensor - Tensor(target)
        loss = T.reduce_sum(diff * diff)
        loss.backward()
        losses.append(loss.item())
        opt.step(lr=0.05)
    final = float(np.sum((p.data - target) ** 2))
    losses.append(final)
    assert all(a > b for a, b in zip(losses, losses[1:])), losses


def test_weight_decay_only_touches_decay_flagged():
    w = Parameter("w", np.array([[1.0]]), decay=True)
    b = Parameter("b", np.array([1.0]), decay=False)
    for p in (w, b):
        p.tensor.grad = np.zeros_like(p.data)
    opt = AdamW([w, b], weight_decay=0.1)
    opt.step(lr=0.5)
    assert w.data[0, 0] < 1.0
    assert b.data[0] == 1.0


def test_cosine_schedule_endpoints():
    lr_max, total, warm = 1e-4, 2000, 60
    assert cosine_lr(warm, lr_max, total, warm) == pytest.approx(lr_max)
    assert cosine_lr(total, lr_max, total, warm) == pytest.approx(0.0, abs=1e-12)
    mid = warm + (total - warm) // 2
    assert cosine_lr(mid, lr_max, total, warm) == pytest.approx(0.5 * lr_max, rel=1e-2)
    # warmup is linear from zero
    assert cosine_lr(0, lr_max, total, warm) == 0.0
    assert cosine_lr(30, lr_max, total, warm) == pytest.approx(0.5 * lr_max)
    with pytest.raises(ValueError):
        cosine_lr(total + 1, lr_max, total, warm)


def test_no_warmup_starts_at_peak():
    assert cosine_lr(0, 1e-3, 100, 0) == pytest.approx(1e-3)


def test_state_arrays_roundtrip():
    p = Parameter("w", np.array([1.0, 2.0]))
    opt = AdamW([p])
    p.tensor.grad = np.array([0.1, -0.2], dtype=np.float32)
    opt.step(lr=1e-3)
    saved = {k: v.copy() for k, v in opt.state_arrays().items()}
    opt2 = AdamW([p])
    opt2.load_state_arrays(saved, t=opt.t)
    np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])
    np.testing.assert_array_equal(opt2.v["w"], opt.v["w"])
    assert opt2.t == opt.t
