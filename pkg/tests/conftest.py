"""Shared test utilities: finite-difference checks and toy fixtures."""

import numpy as np
import pytest

from avcc.tensor import Tape


def central_difference(fn, params, h=1e-6, rel_floor=1e-8):
    """Max relative error between analytic and central-difference gradients.

    fn is a closure returning a scalar loss Tensor built from `params`
    (Tensors with requires_grad).  Every coordinate of every parameter is
    checked; use small shapes.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        tape.backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        base = p.data
        for idx in (np.ndindex(*p.shape) if p.shape else [()]):
            plus = base.copy()
            plus[idx] += h
            p.data = plus
            lp = float(fn().data)
            minus = base.copy()
            minus[idx] -= h
            p.data = minus
            lm = float(fn().data)
            p.data = base
            fd = (lp - lm) / (2.0 * h)
            an = float(analytic[idx])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), rel_floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
