import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obstraj import polytraj as P
from obstraj import quadflat as Q
from obstraj.rotations import quat_mul, quat_log, rotmat, yaw_of

G = Q.GRAVITY


def circle_derivs(t, speed=2.0, radius=1.0, yaw=0.0):
    w = speed / radius
    c, s = np.cos(w * t), np.sin(w * t)
    d = np.zeros((5, len(t), 4))
    d[0, :, :3] = np.stack([radius * c, radius * s, np.ones_like(t)], 1)
    for n in range(1, 5):
        # n-th derivative of (cos, sin) rotates the phase by n*pi/2
        d[n, :, 0] = radius * w ** n * np.cos(w * t + n * np.pi / 2)
        d[n, :, 1] = radius * w ** n * np.sin(w * t + n * np.pi / 2)
    d[0, :, 3] = yaw
    return d


def static(acc=(0.0, 0.0, 0.0), yaw=0.0):
    d = np.zeros((5, 4))
    d[0, :3] = (1.0, 2.0, 3.0)
    d[2, :3] = acc
    d[0, 3] = yaw
    return Q.FlatOutput(d)


def hover_pp(T=2.0):
    c = np.zeros((1, 4, 7))
    c[0, :, 0] = (0.5, -0.2, 1.0, 0.3)
    return P.PiecewisePolynomial(np.array([0.0, T]), c)


def test_hover_state_and_controls():
    s = Q.flat_to_state(static())
    np.testing.assert_allclose(s.rotation, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(s.position, (1.0, 2.0, 3.0))
    np.testing.assert_allclose(s.quaternion, (1, 0, 0, 0), atol=1e-15)
    u = Q.flat_to_controls(static())
    assert u.twr == pytest.approx(1.0)
    np.testing.assert_allclose(u.omega, 0.0, atol=1e-15)
    np.testing.assert_allclose(u.omega_dot, 0.0, atol=1e-15)


def test_vertical_acceleration():
    fo = static(acc=(0.0, 0.0, G / 2))
    np.testing.assert_allclose(Q.flat_to_state(fo).rotation, np.eye(3), atol=1e-15)
    assert Q.flat_to_controls(fo).twr == 1.5


def test_free_fall_is_singular():
    with pytest.raises(Q.FlatnessSingularityError):
        Q.flat_to_state(static(acc=(0.0, 0.0, -G)))


def test_circle_tilt_and_thrust():
    t = np.linspace(0.0, 3.0, 40)
    fo = Q.FlatOutput(circle_derivs(t))
    R = Q.flat_to_state(fo).rotation
    tilt = np.arccos(np.clip(R[:, 2, 2], -1, 1))
    np.testing.assert_allclose(tilt, math.atan(4.0 / G), atol=1e-12)
    np.testing.assert_allclose(Q.flat_to_controls(fo).twr, math.sqrt(16 + G ** 2) / G, rtol=1e-12)


def test_yaw_matches_flat_output():
    t = np.linspace(0.0, 3.0, 13)
    d = circle_derivs(t)
    d[0, :, 3] = 0.7 * np.sin(t)
    d[1, :, 3] = 0.7 * np.cos(t)
    d[2, :, 3] = -0.7 * np.sin(t)
    R = Q.flat_to_state(Q.FlatOutput(d)).rotation
    np.testing.assert_allclose(yaw_of(R), d[0, :, 3], atol=1e-12)


def _smooth_pp(seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(scale=0.2, size=(2, 4, 7))
    c[:, 2, 0] += 1.0
    c /= np.arange(1, 8) ** 1.5
    # make it C^4 at the knot by solving for the second piece's low-order coefficients
    tau = 1.0
    for j in range(4):
        for n in range(5):
            c[1, j, n] = P.basis_row(tau, 6, n) @ c[0, j] / math.factorial(n)
    return P.PiecewisePolynomial(np.array([0.0, 1.0, 2.0]), c)


def test_attitude_reproduces_thrust_vector():
    pp = _smooth_pp()
    t = np.linspace(0.0, 2.0, 57)
    d = P.derivatives(pp, t, 4)
    kin = Q.kinematics(d)
    thrust = d[2, :, :3] + G * Q.E3
    np.testing.assert_allclose(kin["R"][:, :, 2] * (kin["twr"] * G)[:, None], thrust, atol=1e-9)


def test_body_rates_match_attitude_differences():
    pp = _smooth_pp(1)
    h = 1e-4
    for t in (0.3, 1.4):
        R0, R1 = (Q.flat_to_state(Q.FlatOutput(P.derivatives(pp, t + s, 4)[:, 0])).quaternion for s in (-h, h))
        dq = quat_mul(np.array([R0[0], *(-R0[1:])]), R1)
        w_fd = quat_log(dq) / (2 * h)
        w = Q.flat_to_controls(Q.FlatOutput(P.derivatives(pp, t, 4)[:, 0])).omega
        np.testing.assert_allclose(w, w_fd, atol=1e-3)


def test_body_acceleration_matches_rate_differences():
    pp = _smooth_pp(2)
    h = 1e-4
    t = 0.8
    wp, wm = (Q.flat_to_controls(Q.FlatOutput(P.derivatives(pp, t + s, 4)[:, 0])).omega for s in (h, -h))
    wd = Q.flat_to_controls(Q.FlatOutput(P.derivatives(pp, t, 4)[:, 0])).omega_dot
    np.testing.assert_allclose(wd, (wp - wm) / (2 * h), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-5, 5))
def test_twr_independent_of_yaw(psi, dpsi, ddpsi):
    t = np.linspace(0.0, 1.0, 5)
    d = circle_derivs(t)
    base = Q.kinematics(d)["twr"]
    d[0, :, 3] = psi
    d[1, :, 3] = dpsi
    d[2, :, 3] = ddpsi
    np.testing.assert_allclose(Q.kinematics(d)["twr"], base, rtol=1e-14)


def test_hover_margins():
    mg = Q.constraint_margins(hover_pp(), Q.PhysicalLimits(), 0.1)
    np.testing.assert_allclose(mg, np.tile([0.5, math.pi, 5 * math.pi], (len(mg), 1)), atol=1e-12)


def test_vertical_overshoot_infeasible():
    # z(t) = 0.3 g t^2 on [0, 1] has vertical acceleration 0.6 g everywhere
    c = np.zeros((1, 4, 7))
    c[0, 2, 2] = 0.3 * G
    pp = P.PiecewisePolynomial(np.array([0.0, 1.0]), c)
    mg = Q.constraint_margins(pp)
    assert mg[:, 0].min() == pytest.approx(-0.1)


def test_margin_refinement():
    pp = _smooth_pp(3)
    coarse = Q.constraint_margins(pp, sample_dt=0.02).min(0)
    fine = Q.constraint_margins(pp, sample_dt=0.01).min(0)
    assert np.max(np.abs(coarse - fine)) < 1e-3


def test_singularity_reports_time():
    c = np.zeros((1, 4, 7))
    c[0, 2, 2] = -G / 2
    pp = P.PiecewisePolynomial(np.array([0.0, 1.0]), c)
    with pytest.raises(Q.FlatnessSingularityError) as err:
        Q.constraint_margins(pp)
    assert err.value.time == 0.0


def test_limits_validated():
    with pytest.raises(ValueError):
        Q.PhysicalLimits(twr_max=0.0)
    with pytest.raises(ValueError):
        Q.FlatOutput(np.zeros((4, 4)))


def test_specific_force_in_body_frame():
    t = np.linspace(0.0, 1.0, 7)
    d = circle_derivs(t)
    kin = Q.kinematics(d)
    world = np.einsum("nij,nj->ni", kin["R"], kin["specific_force"])
    np.testing.assert_allclose(world, d[2, :, :3] + G * Q.E3, atol=1e-12)
    np.testing.assert_allclose(kin["specific_force"][:, :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.einsum("nij,nkj->nik", kin["R"], kin["R"]), np.broadcast_to(np.eye(3), (7, 3, 3)), atol=1e-12)
    assert rotmat(np.array([1.0, 0, 0, 0])).shape == (3, 3)
