"""Adam: trivial fixed points, the first-step property, and agreement
with an independent scalar transcription."""

import numpy as np
import pytest

from palimpsa.errors import ConfigError
from palimpsa.mqar.optim import AdamState, adam_step
from palimpsa.oracles import adam_transcription


def test_zero_grads_zero_decay_is_identity():
    params = {"w": np.array([0.3, -1.2, 4.0]), "b": np.array([[2.0]])}
    before = {k: v.copy() for k, v in params.items()}
    state = AdamState.init(params)
    adam_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, lr=1e-2)
    for k in params:
        assert np.array_equal(params[k], before[k])
    assert state.t == 1


def test_first_step_is_minus_lr():
    params = {"x": np.array([0.5])}
    state = AdamState.init(params)
    adam_step(params, {"x": np.array([1.0])}, state, lr=1e-3)
    # bias correction makes mhat = g, sqrt(vhat) = |g| on step one
    assert abs(params["x"][0] - (0.5 - 1e-3)) <= 1e-3 * 1e-7


def test_matches_scalar_transcription_100_steps():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    gs = rng.standard_normal((100, 5))
    params = {"x": x0.copy()}
    state = AdamState.init(params)
    for t in range(100):
        adam_step(params, {"x": gs[t]}, state, lr=2e-3, weight_decay=0.01)
    for j in range(5):
        ref = adam_transcription(x0[j], gs[:, j], lr=2e-3, weight_decay=0.01)
        assert abs(params["x"][j] - ref) <= 1e-12


def test_decoupled_decay_shrinks_geometrically():
    params = {"x": np.array([2.0, -3.0])}
    state = AdamState.init(params)
    lr, wd = 1e-2, 0.1
    for _ in range(3):
        adam_step(params, {"x": np.zeros(2)}, state, lr=lr, weight_decay=wd)
    expected = np.array([2.0, -3.0]) * (1.0 - lr * wd) ** 3
    assert np.allclose(params["x"], expected, rtol=1e-14, atol=0)


def test_dtype_preserved_for_f32():
    params = {"x": np.ones(3, dtype=np.float32)}
    state = AdamState.init(params)
    adam_step(params, {"x": np.full(3, 0.5, dtype=np.float32)}, state, lr=1e-3)
    assert params["x"].dtype == np.float32
    assert state.m["x"].dtype == np.float32


def test_validation():
    params = {"x": np.ones(3)}
    state = AdamState.init(params)
    with pytest.raises(ConfigError):
        adam_step(params, {"y": np.ones(3)}, state, lr=1e-3)
    with pytest.raises(ConfigError):
        adam_step(params, {"x": np.ones(4)}, state, lr=1e-3)
