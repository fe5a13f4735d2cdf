"""Optimizer tests against hand-stepped scalar arithmetic."""

import numpy as np
import pytest

from mvqa.autodiff import ShapeError, Tensor
from mvqa.optim import BETA1, BETA2, EPSILON, AdamaxState, adamax_step


def scalar_param(value=1.0):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True, name="theta")
    return {"theta": p}


class TestAdamaxStep:
    def test_zero_gradient_fresh_state_no_move(self):
        params = scalar_param(1.0)
        state = AdamaxState(params)
        adamax_step(params, {"theta": np.zeros(1)}, state, lr=0.005)
        assert params["theta"].data[0] == 1.0

    def test_missing_gradient_treated_as_zero(self):
        params = scalar_param(2.5)
        state = AdamaxState(params)
        adamax_step(params, {}, state, lr=0.01)
        assert params["theta"].data[0] == 2.5

    def test_single_step_hand_oracle(self):
        """theta=1, g=1, lr=0.005: m=0.1, u=1, correction 0.1."""
        params = scalar_param(1.0)
        state = AdamaxState(params)
        adamax_step(params, {"theta": np.ones(1)}, state, lr=0.005)
        want = 1.0 - (0.005 / (1.0 - BETA1)) * (0.1 / (1.0 + EPSILON))
        np.testing.assert_allclose(params["theta"].data[0], want, rtol=1e-12)

    def test_two_step_hand_oracle(self):
        params = scalar_param(1.0)
        state = AdamaxState(params)
        adamax_step(params, {"theta": np.ones(1)}, state, lr=0.005)
        theta1 = params["theta"].data[0]
        adamax_step(params, {"theta": np.full(1, 0.5)}, state, lr=0.005)

        m2 = BETA1 * 0.1 + (1 - BETA1) * 0.5
        u2 = max(BETA2 * 1.0, 0.5)
        want = theta1 - (0.005 / (1.0 - BETA1 ** 2)) * m2 / (u2 + EPSILON)
        np.testing.assert_allclose(params["theta"].data[0], want, rtol=1e-12)

    def test_u_nondecreasing_under_growing_gradients(self):
        params = scalar_param(0.0)
        state = AdamaxState(params)
        previous = 0.0
        for k in range(1, 20):
            adamax_step(params, {"theta": np.full(1, 0.1 * k)}, state, lr=0.001)
            current = state.u["theta"][0]
            assert current >= previous
            previous = current

    def test_step_counter_increments_by_one(self):
        params = scalar_param()
        state = AdamaxState(params)
        for expected in (1, 2, 3):
            adamax_step(params, {"theta": np.ones(1)}, state, lr=0.001)
            assert state.t == expected

    def test_coordinates_update_independently(self):
        p = Tensor(np.zeros(4), requires_grad=True, name="w")
        params = {"w": p}
        state = AdamaxState(params)
        grad = np.zeros(4)
        grad[2] = 1.0
        adamax_step(params, {"w": grad}, state, lr=0.01)
        assert p.data[2] != 0.0
        np.testing.assert_array_equal(p.data[[0, 1, 3]], np.zeros(3))

    def test_shape_mismatch_rejected(self):
        params = scalar_param()
        state = AdamaxState(params)
        with pytest.raises(ShapeError):
            adamax_step(params, {"theta": np.ones(2)}, state, lr=0.01)

    def test_unknown_parameter_rejected(self):
        params = scalar_param()
        state = AdamaxState(params)
        params["extra"] = Tensor(np.zeros(1), requires_grad=True)
        with pytest.raises(ShapeError):
            adamax_step(params, {}, state, lr=0.01)

    def test_nonpositive_lr_rejected(self):
        params = scalar_param()
        with pytest.raises(ValueError):
            adamax_step(params, {}, AdamaxState(params), lr=0.0)

    def test_descends_a_quadratic(self):
        """Minimizing (theta-3)^2 walks theta toward 3."""
        params = scalar_param(0.0)
        state = AdamaxState(params)
        for _ in range(2000):
            g = 2.0 * (params["theta"].data - 3.0)
            adamax_step(params, {"theta": g}, state, lr=0.05)
        np.testing.assert_allclose(params["theta"].data[0], 3.0, atol=1e-2)
