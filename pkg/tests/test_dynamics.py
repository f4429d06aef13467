import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from a2visr.dynamics import (DynamicsParams, ImuSample, RelativeState, average_input, compute_input, discretize,
                             propagate, relative_velocity_reference)
from a2visr.geometry import UnitQuaternion, rot_x, rot_z


def test_level_hover_cancels_gravity():
    s = ImuSample(0.0, (0.0, 0.0, 1.0), UnitQuaternion.identity())
    assert np.allclose(compute_input(s, DynamicsParams()), 0.0, atol=1e-15)


def test_free_fall():
    s = ImuSample(0.0, (0.0, 0.0, 0.0), UnitQuaternion.identity())
    assert np.allclose(compute_input(s, DynamicsParams()), [0, 0, -9.81])


def test_rolled_thrust_against_rotated_oracle():
    roll = np.deg2rad(10)
    s = ImuSample(0.0, (0.0, 0.0, 1.0), UnitQuaternion.from_axis_angle([1, 0, 0], roll))
    want = 9.81 * rot_x(roll) @ [0, 0, 1] - [0, 0, 9.81]
    got = compute_input(s, DynamicsParams())
    assert np.allclose(got, want, atol=1e-12)
    assert abs(got[1]) > 1.0


def test_average_input_empty_and_mean():
    p = DynamicsParams()
    assert np.array_equal(average_input([], p), np.zeros(3))
    q = UnitQuaternion.identity()
    batch = [ImuSample(0.0, (0.0, 0.0, 1.0), q), ImuSample(0.01, (0.2, 0.0, 1.0), q)]
    assert np.allclose(average_input(batch, p), [0.981, 0, 0])


def test_discretize_default_values():
    st_ = discretize(DynamicsParams())
    assert np.allclose(st_.A[3:, 3:], 0.992 * np.eye(3), atol=1e-15)
    assert np.allclose(st_.A[:3, 3:], 0.04 * np.eye(3))
    assert np.allclose(st_.B[:3], 0.0008 * np.eye(3))
    assert np.allclose(st_.B[3:], 0.04 * np.eye(3))


def test_discretize_zero_drag_double_integrator():
    A = discretize(DynamicsParams(mu=(0, 0, 0))).A
    assert np.array_equal(A, np.block([[np.eye(3), 0.04 * np.eye(3)], [np.zeros((3, 3)), np.eye(3)]]))


def test_discretize_anisotropic_drag():
    A = discretize(DynamicsParams(mu=(1.2, 0.2, 1.2), dt=0.01)).A
    assert np.allclose(np.diag(A[3:, 3:]), [0.988, 0.998, 0.988])


def test_discretize_rejects_non_contractive():
    with pytest.raises(ValueError, match="not contractive"):
        discretize(DynamicsParams(mu=(30.0, 0.2, 0.2), dt=0.04))


def test_params_validation():
    with pytest.raises(ValueError):
        DynamicsParams(dt=0.0)
    with pytest.raises(ValueError):
        DynamicsParams(mu=(-0.1, 0, 0))


def test_propagate_fixed_point_and_ballistic():
    st0 = discretize(DynamicsParams(mu=(0, 0, 0)))
    assert np.array_equal(propagate(RelativeState.zero(), np.zeros(3), st0).as_vector(), np.zeros(6))
    x = RelativeState([1, 2, 3], [0.5, -1, 2])
    y = propagate(x, np.zeros(3), st0)
    assert np.allclose(y.p, x.p + 0.04 * x.v)
    assert np.array_equal(y.v, x.v)


def test_propagate_against_ode_solution():
    # oracle: integrate p' = v, v' = u - mu v with an adaptive ODE solver
    mu = np.array([0.2, 0.5, 1.0])
    u = np.array([0.3, -0.2, 0.1])
    p = DynamicsParams(mu=tuple(mu), dt=0.01)
    st_ = discretize(p)
    x = RelativeState([0.0, 0.0, 0.5], [0.6, 0.0, -0.1])
    for _ in range(100):
        x = propagate(x, u, st_)
    sol = solve_ivp(lambda t, y: np.concatenate([y[3:], u - mu * y[3:]]), (0, 1.0),
                    [0.0, 0.0, 0.5, 0.6, 0.0, -0.1], rtol=1e-11, atol=1e-12)
    ref = sol.y[:, -1]
    err = np.abs(x.as_vector() - ref).max()
    assert err < 0.01  # first-order scheme at dt = 0.01 over 1 s
    assert err > 1e-6  # and it is not the exact exponential


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_drag_dissipates_each_axis(v0):
    st_ = discretize(DynamicsParams())
    x = RelativeState(np.zeros(3), v0)
    for _ in range(20):
        y = propagate(x, np.zeros(3), st_)
        assert np.all(np.abs(y.v) <= np.abs(x.v))
        x = y


def test_zero_drag_conserves_velocity():
    st_ = discretize(DynamicsParams(mu=(0, 0, 0)))
    x = RelativeState([0, 0, 0], [0.1, 0.2, 0.3])
    for _ in range(50):
        x = propagate(x, np.zeros(3), st_)
    assert np.array_equal(x.v, [0.1, 0.2, 0.3])


def test_relative_velocity_reference():
    assert np.array_equal(relative_velocity_reference(np.zeros(3), np.eye(3), np.zeros(3)), np.zeros(3))
    assert np.array_equal(relative_velocity_reference([1, 0, 0], np.eye(3), [1, 0, 0]), np.zeros(3))
    assert np.allclose(relative_velocity_reference([1, 0, 0], rot_z(np.pi / 2), np.zeros(3)), [0, 1, 0])


def test_relative_state_rejects_non_finite():
    with pytest.raises(ValueError):
        RelativeState([np.nan, 0, 0], [0, 0, 0])
