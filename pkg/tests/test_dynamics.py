import numpy as np
import pytest

from branchmpc import dynamics
from branchmpc.models import QUADRUPED, VEHICLE, model_by_name

from helpers import central_difference

rng = np.random.default_rng(7)


def test_vehicle_derivative_components():
    x = np.array([1.0, -2.0, 3.0, 0.5])
    u = np.array([0.7, -0.2])
    dx = dynamics.derivative(x, u, VEHICLE)
    assert np.allclose(dx, [3.0 * np.cos(0.5), 3.0 * np.sin(0.5), 0.7, -0.2])


def test_vehicle_straight_line_step():
    x = np.array([0.0, 0.0, 10.0, 0.0])
    u = np.zeros(2)
    nxt = dynamics.step(x, u, 0.1, VEHICLE)
    assert np.allclose(nxt, [1.0, 0.0, 10.0, 0.0])


def test_quadruped_pure_rotation():
    x = np.zeros(3)
    u = np.array([0.0, 0.0, 0.3])
    nxt = dynamics.step(x, u, 0.1, QUADRUPED)
    assert np.allclose(nxt, [0.0, 0.0, 0.03])


def test_quadruped_lateral_velocity_rotates_with_heading():
    x = np.array([0.0, 0.0, np.pi / 2])
    u = np.array([1.0, 0.0, 0.0])
    dx = dynamics.derivative(x, u, QUADRUPED)
    assert np.allclose(dx, [0.0, 1.0, 0.0], atol=1e-12)


def test_step_rejects_bad_dt_and_shapes():
    x = np.zeros(4)
    with pytest.raises(ValueError):
        dynamics.step(x, np.zeros(2), 0.0, VEHICLE)
    with pytest.raises(ValueError):
        dynamics.step(np.zeros(3), np.zeros(2), 0.1, VEHICLE)
    with pytest.raises(ValueError):
        dynamics.step(x, np.zeros(3), 0.1, VEHICLE)
    with pytest.raises(ValueError):
        model_by_name("hovercraft")


@pytest.mark.parametrize("model", [VEHICLE, QUADRUPED])
def test_jacobians_match_finite_differences(model):
    dt = 0.1
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=[20.0, 5.0, 8.0, 0.5][: model.n_x], size=model.n_x)
        u = rng.normal(scale=2.0, size=model.n_u)
        lin = dynamics.linearize(x, u, dt, model)
        JA = central_difference(lambda v: dynamics.step(v, u, dt, model), x)
        JB = central_difference(lambda v: dynamics.step(x, v, dt, model), u)
        denom = max(1.0, np.abs(JA).max(), np.abs(JB).max())
        worst = max(worst,
                    np.abs(lin.A - JA).max() / denom,
                    np.abs(lin.B - JB).max() / denom)
    assert worst <= 1e-6


@pytest.mark.parametrize("model", [VEHICLE, QUADRUPED])
def test_linearization_exact_at_expansion_point(model):
    for _ in range(20):
        x = rng.normal(size=model.n_x)
        u = rng.normal(size=model.n_u)
        lin = dynamics.linearize(x, u, 0.05, model)
        assert np.allclose(lin.A @ x + lin.B @ u + lin.C,
                           dynamics.step(x, u, 0.05, model), atol=1e-12)


def test_step_is_deterministic():
    x = rng.normal(size=4)
    u = rng.normal(size=2)
    a = dynamics.step(x, u, 0.1, VEHICLE)
    b = dynamics.step(x.copy(), u.copy(), 0.1, VEHICLE)
    assert np.array_equal(a, b)
