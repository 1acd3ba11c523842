import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.utils.autodiff import Tensor
from src.utils.errors import ShapeError
from src.utils.optim import AdamState, adam_step, cosine_lr


def test_first_adam_step_moves_by_learning_rate():
    params = {"w": Tensor(np.array([1.0, -1.0, 2.0]), requires_grad=True)}
    adam_step(params, {"w": np.array([0.5, -3.0, 1e-3])}, AdamState(), lr=0.1)
    assert_allclose(params["w"].data, [0.9, -0.9, 1.9], atol=1e-4)


def test_adam_keeps_parameter_dtype():
    params = {"w": Tensor(np.ones(2), requires_grad=True, dtype=np.float32)}
    adam_step(params, {"w": np.ones(2)}, AdamState(), lr=0.01)
    assert params["w"].dtype == np.float32


def test_adam_minimizes_a_quadratic():
    params = {"x": Tensor(np.array([3.0, -2.0]), requires_grad=True)}
    state = AdamState()
    for _ in range(500):
        adam_step(params, {"x": 2.0 * (params["x"].data - 1.0)}, state, lr=0.05)
    assert_allclose(params["x"].data, [1.0, 1.0], atol=0.05)
    assert state.t == 500


def test_adam_rejects_mismatched_gradient():
    params = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.ones(3)}, AdamState(), lr=0.1)


def test_adam_rejects_non_positive_learning_rate():
    with pytest.raises(ValueError):
        adam_step({}, {}, AdamState(), lr=0.0)


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 50, 100, min_lr=1e-4) == pytest.approx(0.5 * (1e-3 + 1e-4))
    assert cosine_lr(1e-3, 100, 100, min_lr=1e-4) == pytest.approx(1e-4)
    assert cosine_lr(1e-3, 500, 100) == pytest.approx(0.0, abs=1e-12)
    assert math.isclose(cosine_lr(2e-3, 3, 0), 2e-3)
