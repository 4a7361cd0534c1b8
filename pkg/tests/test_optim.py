import math

import numpy as np
import pytest

from adnet.optim import AdamState, adam_step, decayed_lr


def scalar_adam(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-float Adam written out term by term."""
    x, m, v = x0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
    return x


def test_zero_grad_first_step_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.01, 250.0])
    adam_step(p, {"w": g}, AdamState(), lr=1e-4)
    np.testing.assert_allclose(p["w"], -1e-4 * np.sign(g), rtol=1e-5)


def test_quadratic_trajectory_matches_scalar_oracle():
    # minimise sum((x - c)^2) for a few independent coordinates
    c = np.array([0.3, -1.7, 4.0])
    x0 = np.array([2.0, 0.5, -3.0])
    p = {"x": x0.copy()}
    state = AdamState()
    for _ in range(10):
        adam_step(p, {"x": 2 * (p["x"] - c)}, state, lr=0.05)
    want = [scalar_adam(a, lambda x, ci=ci: 2 * (x - ci), 10, 0.05) for a, ci in zip(x0, c)]
    np.testing.assert_allclose(p["x"], want, rtol=0, atol=1e-12)
    assert state.step == 10


def test_state_shapes_and_mismatch():
    p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    state = adam_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, AdamState())
    assert {k: v.shape for k, v in state.m.items()} == {"a": (2, 3), "b": (4,)}
    with pytest.raises(ValueError):
        adam_step(p, {"a": np.ones(6), "b": np.ones(4)}, state)


def test_decay_schedule():
    assert decayed_lr(1e-4, 99, 100) == 1e-4
    assert decayed_lr(1e-4, 100, 100) == pytest.approx(1e-5)
