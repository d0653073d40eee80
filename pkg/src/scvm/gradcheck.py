"""Central finite-difference verification of analytic gradients.

The checker is the independent oracle for the whole package: it never
looks at an op's backward rule, only at forward evaluations under
perturbed inputs. It must run in float64 mode; float32 rounding is far
too coarse for the 1e-4 error budget.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericalError, ShapeError, Tensor, no_grad, precision_mode

DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4


def grad_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = DEFAULT_STEP,
) -> float:
    """Max relative error between analytic and numeric gradients of f.

    f rebuilds its graph on every call (define-by-run); wrt lists the
    leaf tensors whose gradients are checked. The relative error at each
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if precision_mode() != "float64":
        raise NumericalError("grad_check requires float64 precision mode")
    for t in wrt:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got {loss.data.shape}")
    loss.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt
    ]

    max_err = 0.0
    for ti, t in enumerate(wrt):
        for flat in range(t.data.size):
            idx = np.unravel_index(flat, t.data.shape)
            orig = t.data[idx]
            try:
                t.data[idx] = orig + step
                with no_grad():
                    up = float(f().data)
                t.data[idx] = orig - step
                with no_grad():
                    dn = float(f().data)
            except NumericalError as exc:
                raise NumericalError(
                    f"grad_check: {exc} at input {ti} coordinate {tuple(map(int, idx))}"
                )
            finally:
                t.data[idx] = orig
            num = (up - dn) / (2.0 * step)
            ana = float(analytic[ti][idx])
            if not (math.isfinite(num) and math.isfinite(ana)):
                raise NumericalError(
                    f"grad_check: non-finite gradient at input {ti} "
                    f"coordinate {tuple(map(int, idx))}"
                )
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if err > max_err:
                max_err = err
    return max_err
