import math

import numpy as np
import pytest

from pvckit.autodiff import Tensor
from pvckit.errors import ContractError, DimensionError
from pvckit.optim import AdamState, adam_step, fans, xavier_bound, xavier_init


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"p": Tensor(np.array(0.0), requires_grad=True)}
    adam_step(p, {"p": np.array(1.0)}, AdamState(), lr=0.1)
    assert math.isclose(float(p["p"].data), -0.1, rel_tol=1e-7)


def test_adam_descends_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    state = AdamState()
    losses = []
    for _ in range(10):
        diff = p["x"].data - target
        losses.append(float(np.sum(diff**2)))
        adam_step(p, {"x": 2 * diff}, state, lr=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert state.step == 10


def test_adam_errors():
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(DimensionError):
        adam_step(p, {"x": np.zeros(2)}, AdamState())
    with pytest.raises(ContractError):
        adam_step(p, {"x": np.zeros(3)}, AdamState(), beta1=1.0)


def test_xavier_variance_and_bounds():
    shape = (80, 60, 3, 3, 3)
    fan_in, fan_out = fans(shape)
    assert (fan_in, fan_out) == (60 * 27, 80 * 27)
    w = xavier_init(shape, seed=0).data
    assert w.size > 1e5
    expected = 2.0 / (fan_in + fan_out)
    assert abs(w.var() - expected) / expected < 0.1
    assert np.max(np.abs(w)) <= xavier_bound(shape)


def test_xavier_deterministic():
    a = xavier_init((4, 3), seed=11).data
    b = xavier_init((4, 3), seed=11).data
    c = xavier_init((4, 3), seed=12).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_xavier_gain_scales_bound():
    w = xavier_init((8, 8, 3, 3, 3), seed=1, gain=2.0).data
    assert np.max(np.abs(w)) <= xavier_bound((8, 8, 3, 3, 3), 2.0)
    assert np.max(np.abs(w)) > xavier_bound((8, 8, 3, 3, 3), 1.0)
