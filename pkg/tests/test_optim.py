import numpy as np
import pytest

from pournet.exceptions import ShapeError
from pournet.services.optim import AdamState, adam_step


def test_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 0.0])}
    state = AdamState()
    adam_step(params, grads, state, lr=0.1)
    # bias correction makes the first update lr * g / (|g| + eps)
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-6)
    assert state.t == 1


def test_moments_follow_recurrence():
    params = {"w": np.zeros(2)}
    state = AdamState()
    g1, g2 = np.array([1.0, 2.0]), np.array([3.0, -1.0])
    adam_step(params, {"w": g1}, state, lr=0.01, betas=(0.5, 0.75))
    adam_step(params, {"w": g2}, state, lr=0.01, betas=(0.5, 0.75))
    np.testing.assert_allclose(state.m["w"], 0.5 * (0.5 * g1) + 0.5 * g2)
    np.testing.assert_allclose(state.v["w"], 0.75 * (0.25 * g1**2) + 0.25 * g2**2)
    assert state.t == 2


def test_minimizes_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    state = AdamState()
    for _ in range(500):
        adam_step(params, {"w": 2.0 * params["w"]}, state, lr=0.05)
    assert np.all(np.abs(params["w"]) < 0.05)


def test_preserves_float32():
    params = {"w": np.ones(3, dtype=np.float32)}
    adam_step(params, {"w": np.ones(3, dtype=np.float32)}, AdamState(), lr=1e-3)
    assert params["w"].dtype == np.float32


def test_rejects_gradient_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState(), lr=0.1)


def test_matches_reference_formulas_over_ten_steps(rng):
    start = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(10)]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

    params = {"w": start.copy()}
    state = AdamState()
    for g in grads:
        adam_step(params, {"w": g}, state, lr=lr, betas=(b1, b2), eps=eps)

    w, m, v = start.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(params["w"], w, atol=1e-10)


def test_failed_step_leaves_state_untouched():
    params = {"a": np.ones(2), "b": np.ones(3)}
    state = AdamState()
    with pytest.raises(ShapeError):
        adam_step(params, {"a": np.ones(2), "b": np.ones(4)}, state, lr=0.1)
    assert state.t == 0
    assert state.m == {}
    np.testing.assert_array_equal(params["a"], np.ones(2))
    with pytest.raises(ShapeError, match="no gradient"):
        adam_step(params, {"a": np.ones(2)}, state, lr=0.1)
    assert state.t == 0


def test_moments_are_float64_for_float32_parameters():
    params = {"w": np.ones(3, dtype=np.float32)}
    state = AdamState()
    adam_step(params, {"w": np.full(3, 0.5, dtype=np.float32)}, state, lr=1e-3)
    assert state.m["w"].dtype == np.float64
    assert state.v["w"].dtype == np.float64
