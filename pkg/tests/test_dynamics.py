import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpgdrive import dynamics as dyn

GEOM = dyn.VehicleGeometry(2.0, 2.0, 2.0)
BIKE = dyn.KinematicBicycle(2.0, 2.0, 0.0)


def euler_fine(x, u, ts, substeps=50_000):
    """Independent fine-step integration oracle for the bicycle.

    Euler's own global error is O(ts/substeps); at 50k substeps it sits well
    inside the 1e-6 comparison band for these trajectories.
    """
    state = x.as_tuple()
    h = ts / substeps
    for _ in range(substeps):
        d = dyn._bicycle_rhs(state, u.as_tuple(), BIKE.lf, BIKE.lr, BIKE.mu)
        state = tuple(s + h * di for s, di in zip(state, d))
    return state


def test_bicycle_derivative_straight():
    d = dyn.bicycle_derivative(dyn.VehicleState(0, 0, 0, 5), dyn.InputSample(0, 0), GEOM)
    assert d == (5.0, 0.0, 0.0, 0.0)


def test_bicycle_derivative_accelerating():
    d = dyn.bicycle_derivative(dyn.VehicleState(0, 0, 0, 5), dyn.InputSample(1, 0), GEOM)
    assert d == (5.0, 0.0, 0.0, 1.0)


def test_bicycle_derivative_hand_value():
    # beta = atan(0.5), sin(atan(0.5)) = 1/sqrt(5), cos = 2/sqrt(5)
    d = dyn.bicycle_derivative(
        dyn.VehicleState(0, 0, 0, 5), dyn.InputSample(0, math.pi / 4), GEOM
    )
    s5 = math.sqrt(5.0)
    assert d[0] == pytest.approx(10.0 / s5, abs=1e-12)
    assert d[1] == pytest.approx(5.0 / s5, abs=1e-12)
    assert d[2] == pytest.approx(s5 / 2.0, abs=1e-12)
    assert d[3] == 0.0


def test_bicycle_steering_domain():
    with pytest.raises(dyn.DomainError):
        dyn.bicycle_derivative(dyn.VehicleState(0, 0, 0, 5), dyn.InputSample(0, math.pi / 2), GEOM)


def test_constant_velocity_step():
    out = dyn.step(dyn.ConstantVelocity(), dyn.VehicleState(7, 0, 0, 5), None, 0.2)
    assert (out.px, out.py, out.psi, out.v) == (8.0, 0.0, 0.0, 5.0)


def test_stationary_step():
    x = dyn.VehicleState(45, 3, 0, 0)
    out = dyn.step(dyn.Stationary(), x, None, 0.2)
    assert out == x


def test_double_integrator_exact():
    x = dyn.VehicleState(1.0, 0.0, 0.0, 5.0)
    out = dyn.step(dyn.LongitudinalDoubleIntegrator(), x, dyn.InputSample(a=2.0), 0.2)
    assert out.px == pytest.approx(1.0 + 0.2 * 5.0 + 0.5 * 0.04 * 2.0, abs=1e-15)
    assert out.v == pytest.approx(5.4, abs=1e-15)
    assert out.py == 0.0 and out.psi == 0.0


def test_rk4_against_fine_integration():
    x = dyn.VehicleState(0.5, -0.2, 0.1, 5.0)
    u = dyn.InputSample(a=0.0, delta=0.1)
    got = dyn.step(BIKE, x, u, 0.2)
    want = euler_fine(x, u, 0.2)
    for g, w in zip(got.as_tuple(), want):
        assert abs(g - w) <= 1e-6


def test_rk4_order():
    # Halving the step must shrink per-step error by at least 8x (RK4 ~16x).
    x = dyn.VehicleState(0.0, 0.0, 0.2, 4.0)
    u = dyn.InputSample(a=1.5, delta=0.25)
    exact = euler_fine(x, u, 0.2, substeps=400_000)

    def err(ts, n):
        s = x
        for _ in range(n):
            s = dyn.step(BIKE, s, u, ts)
        return max(abs(a - b) for a, b in zip(s.as_tuple(), exact))

    e1 = err(0.2, 1)
    e2 = err(0.1, 2)
    assert e1 / e2 >= 8.0


def test_rollout_identity():
    x0 = dyn.VehicleState(1, 2, 0, 3)
    assert dyn.rollout(BIKE, x0, [], 0.2) == [x0]


def test_rollout_constant_velocity_sequence():
    x0 = dyn.VehicleState(7, 0, 0, 5)
    states = dyn.rollout(dyn.ConstantVelocity(), x0, [None] * 3, 0.2)
    assert [s.px for s in states] == [7.0, 8.0, 9.0, 10.0]


def test_rollout_straight_line_spacing():
    x0 = dyn.VehicleState(0, 0, 0, 5)
    states = dyn.rollout(BIKE, x0, [dyn.InputSample(0, 0)] * 4, 0.2)
    for k, s in enumerate(states):
        assert s.px == pytest.approx(k * 1.0, abs=1e-12)
        assert s.py == 0.0


def test_rollout_causality():
    rng = np.random.default_rng(0)
    useq = [dyn.InputSample(a, d) for a, d in rng.uniform(-0.5, 0.5, (6, 2))]
    x0 = dyn.VehicleState(0, 0, 0, 5)
    base = dyn.rollout(BIKE, x0, useq, 0.2)
    for j in range(3, 6):
        bumped = list(useq)
        bumped[j] = dyn.InputSample(useq[j].a + 1.0, useq[j].delta - 0.2)
        out = dyn.rollout(BIKE, x0, bumped, 0.2)
        for k in range(j + 1):
            assert out[k] == base[k]


def test_speed_conserved_without_friction_or_accel():
    x0 = dyn.VehicleState(0, 0, 0, 5)
    useq = [dyn.InputSample(0.0, d) for d in (0.1, -0.2, 0.3, 0.0, -0.1)]
    for s in dyn.rollout(BIKE, x0, useq, 0.2):
        assert abs(s.v - 5.0) <= 1e-9


def test_body_points_axis_aligned():
    pts = dyn.body_points(dyn.VehicleState(0, 0, 0, 1), GEOM)
    want = np.array([[2, 1], [2, -1], [-2, 1], [-2, -1], [2, 0]], dtype=float)
    assert np.array_equal(pts, want)


def test_body_points_quarter_turn():
    pts = dyn.body_points(dyn.VehicleState(0, 0, math.pi / 2, 1), GEOM)
    want = np.array([[-1, 2], [1, 2], [-1, -2], [1, -2], [0, 2]], dtype=float)
    assert np.max(np.abs(pts - want)) <= 1e-12


def test_body_points_rotation_oracle():
    psi = 0.3
    base = dyn.body_points(dyn.VehicleState(0, 0, 0, 1), GEOM)
    rot = np.array([[math.cos(psi), -math.sin(psi)], [math.sin(psi), math.cos(psi)]])
    want = base @ rot.T
    got = dyn.body_points(dyn.VehicleState(0, 0, psi, 1), GEOM)
    assert np.max(np.abs(got - want)) <= 1e-12


@given(
    st.floats(-50, 50),
    st.floats(-50, 50),
    st.floats(-3.1, 3.1),
)
@settings(max_examples=50, deadline=None)
def test_body_points_equivariance(tx, ty, psi):
    base = dyn.body_points(dyn.VehicleState(0, 0, psi, 1), GEOM)
    moved = dyn.body_points(dyn.VehicleState(tx, ty, psi, 1), GEOM)
    assert np.max(np.abs(moved - (base + np.array([tx, ty])))) <= 1e-9


def test_predict_requires_input_free_model():
    with pytest.raises(dyn.DomainError):
        dyn.predict(BIKE, dyn.VehicleState(0, 0, 0, 1), 3, 0.2)
