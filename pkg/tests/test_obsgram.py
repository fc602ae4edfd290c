import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from obstraj import obsgram as O


def linear_model(A, C):
    A = np.asarray(A, float)
    C = np.asarray(C, float)
    n, p = A.shape[0], C.shape[0]
    return O.SystemModel(
        state_dim=n, error_dim=n, meas_dim=p,
        flow=lambda x, u: x @ A.T,
        measure=lambda x: x @ C.T,
        flow_jacobian=lambda x, u: np.broadcast_to(A, (x.shape[0], n, n)),
        measure_jacobian=lambda x: np.broadcast_to(C, (x.shape[0], p, n)),
        retract=lambda x, d: x + d,
    )


CV = linear_model([[0, 1], [0, 0]], [[1, 0]])


def sampled(model_dim, T, step, x0=None, A=None):
    t = np.linspace(0.0, T, int(round(T / step)) + 1)
    x0 = np.zeros(model_dim) if x0 is None else np.asarray(x0, float)
    X = np.stack([expm(A * ti) @ x0 for ti in t]) if A is not None else np.tile(x0, (len(t), 1))
    return O.SampledTrajectory(t, X, np.zeros((len(t), 1)))


def test_constant_velocity_lie_stack():
    x = np.array([0.7, -1.3])
    s = O.lie_derivatives(CV, x, np.zeros(1), 2)
    np.testing.assert_allclose([v[0, 0] for v in s.values], [0.7, -1.3, 0.0], atol=1e-12)
    np.testing.assert_allclose(s.gradients[0][0], [[1, 0]], atol=1e-12)
    np.testing.assert_allclose(s.gradients[1][0], [[0, 1]], atol=1e-9)
    np.testing.assert_allclose(s.gradients[2][0], [[0, 0]], atol=1e-6)


def test_full_state_sensor_without_dynamics():
    m = linear_model(np.zeros((3, 3)), np.eye(3))
    s = O.lie_derivatives(m, np.ones(3), np.zeros(1), 3)
    for v in s.values[1:]:
        np.testing.assert_array_equal(v, 0.0)
    W = O.approx_gramian(m, sampled(3, 2.0, 0.05), O.GramianConfig())
    np.testing.assert_allclose(W.matrix, 2 * np.eye(3), atol=1e-12)


def test_taylor_jacobian_formula():
    rng = np.random.default_rng(0)
    g = tuple(rng.normal(size=(1, 2, 3)) for _ in range(3))
    stack = O.LieStack(tuple(np.zeros((1, 2)) for _ in range(3)), g)
    np.testing.assert_array_equal(O.taylor_jacobian(stack, 0.0), g[0])
    dt = 0.7
    np.testing.assert_allclose(O.taylor_jacobian(stack, dt), g[0] + dt * g[1] + dt ** 2 / 2 * g[2], atol=1e-15)
    cv = O.lie_derivatives(CV, np.array([0.0, 1.0]), np.zeros(1), 1)
    np.testing.assert_allclose(O.taylor_jacobian(cv, 0.5)[0], [[1, 0.5]], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 3))
def test_taylor_jacobian_linear_in_stack(alpha, dt):
    rng = np.random.default_rng(1)
    g = tuple(rng.normal(size=(2, 3, 4)) for _ in range(3))
    stack = O.LieStack(tuple(np.zeros((2, 3)) for _ in range(3)), g)
    np.testing.assert_allclose(O.taylor_jacobian(stack.scaled(alpha), dt), alpha * O.taylor_jacobian(stack, dt),
                               rtol=1e-12, atol=1e-12)


def test_constant_velocity_gramians():
    traj = sampled(2, 1.0, 0.05, x0=[0.0, 1.0], A=np.array([[0.0, 1.0], [0.0, 0.0]]))
    W = O.approx_gramian(CV, traj, O.GramianConfig(taylor_order=1, horizon=0.5))
    np.testing.assert_allclose(W.matrix, [[1, 0.5], [0.5, 0.25]], atol=1e-8)
    E = O.empirical_gramian(CV, traj, O.GramianConfig(epsilon=1e-6))
    exact = np.array([[1, 0.5], [0.5, 1 / 3]])
    assert np.max(np.abs(E.matrix - exact)) / np.max(np.abs(exact)) < 1e-6
    assert O.observability_measure(E, [0, 1]) == pytest.approx((4 - math.sqrt(13)) / 6, abs=1e-9)


def lti_gramian(A, C, T):
    f = lambda t: expm(A.T * t) @ C.T @ C @ expm(A * t)
    return quad_vec(f, 0.0, T, epsabs=1e-13, epsrel=1e-12)[0]


def test_empirical_gramian_matches_lti_closed_form():
    A = np.array([[0.0, 1.0, 0.0], [-2.0, -0.3, 0.5], [0.0, 0.0, -0.4]])
    C = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    model = linear_model(A, C)
    T = 2.0
    traj = sampled(3, T, 0.01, x0=[1.0, 0.0, 0.5], A=A)
    E = O.empirical_gramian(model, traj, O.GramianConfig(step=0.01, epsilon=1e-6), substeps=2)
    W = lti_gramian(A, C, T)
    assert np.max(np.abs(E.matrix - W)) / np.max(np.abs(W)) < 1e-6


def test_quadrature_weights():
    for n in range(1, 12):
        w = O.quadrature_weights(n, 0.1)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(0.1 * (n - 1))
    t = np.linspace(0.0, 1.0, 21)
    assert O.quadrature_weights(21, 0.05) @ t ** 3 == pytest.approx(0.25, abs=1e-14)
    assert O.quadrature_weights(21, 0.05, "trapezoid") @ t == pytest.approx(0.5, abs=1e-14)


def test_gramian_refinement_converges():
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    model = linear_model(A, [[1.0, 0.0]])
    cfg = lambda h: O.GramianConfig(taylor_order=2, horizon=0.5, step=h)
    coarse = O.approx_gramian(model, sampled(2, 3.0, 0.05, [1, 0], A), cfg(0.05)).matrix
    fine = O.approx_gramian(model, sampled(2, 3.0, 0.025, [1, 0], A), cfg(0.025)).matrix
    assert np.max(np.abs(coarse - fine)) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_gramian_monotone_in_horizon(seed, extra_pairs):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3)) * 0.5
    model = linear_model(A, rng.normal(size=(1, 3)))
    traj = sampled(3, 1.0 + 0.1 * extra_pairs, 0.05, rng.normal(size=3), A)
    n0 = 21
    for rule in ("trapezoid", "simpson"):
        cfg = O.GramianConfig(quadrature=rule)
        W0 = O.approx_gramian(model, traj.head(n0), cfg).matrix
        W1 = O.approx_gramian(model, traj.head(n0 + 2 * extra_pairs), cfg).matrix
        # appending samples adds a PSD increment
        assert np.linalg.eigvalsh(W1 - W0).min() > -1e-9 * max(1.0, np.abs(W1).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gramian_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    model = linear_model(A, rng.normal(size=(2, 3)))
    W = O.approx_gramian(model, sampled(3, 1.0, 0.05, rng.normal(size=3), A)).matrix
    assert np.max(np.abs(W - W.T)) < 1e-10
    ev = np.linalg.eigvalsh(W)
    assert ev[0] > -1e-9 * ev[-1]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_principal_submatrix_sigma_min_interlaces(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    W = M @ M.T
    sel = sorted(rng.choice(n, size=rng.integers(1, n + 1), replace=False).tolist())
    assert O.observability_measure(W, sel) >= O.observability_measure(W, range(n)) - 1e-12


def test_observability_measure_examples():
    W = np.diag([3.0, 1.0, 2.0])
    assert O.observability_measure(W, [0, 1, 2]) == pytest.approx(1.0, abs=1e-12)
    assert O.observability_measure(W, [0, 2]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        O.observability_measure(W, [0, 0])
    with pytest.raises(ValueError):
        O.observability_measure(W, [])


def test_rank_test_examples():
    s = O.lie_derivatives(CV, np.array([0.0, 1.0]), np.zeros(1), 1)
    r = O.rank_test(O.observability_matrix(s))
    assert r["rank"] == 2 and r["observable"]
    vel_only = linear_model([[0, 1], [0, 0]], [[0, 1]])
    r = O.rank_test(O.observability_matrix(O.lie_derivatives(vel_only, np.array([0.0, 1.0]), np.zeros(1), 1)))
    assert r["rank"] == 1 and not r["observable"]


def test_gramian_serialization():
    W = O.Gramian(np.diag([2.0, 1.0]), 0.0, 1.0, ("a", "b"))
    d = W.to_dict([1])
    assert d["selection_labels"] == ["b"]
    assert d["sigma_min"] == 1.0
    assert d["rank"] == 2


def test_config_validation():
    with pytest.raises(ValueError):
        O.GramianConfig(taylor_order=0)
    with pytest.raises(ValueError):
        O.GramianConfig(step=0.0)
    with pytest.raises(ValueError):
        O.approx_gramian(CV, O.SampledTrajectory(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1))))
