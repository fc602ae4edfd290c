"""Quadrotor GPS-IMU model and its error-state Kalman filter.

State vector (19): ``[p(3), v(3), q(4), b_w(3), b_a(3), p_ip(3)]`` where
``q`` is the Hamilton quaternion of the IMU-to-world rotation ``R`` (so the
world-to-IMU matrix is ``C(q) = R^T``), ``b_w``/``b_a`` are gyro and
accelerometer biases and ``p_ip`` is the GPS antenna position in the IMU
frame.  Error state (18): ``[dp, dv, dtheta, db_w, db_a, dp_ip]`` with the
attitude error applied on the right, ``R = R_hat Exp(dtheta)``.

Inputs (6): ``[a_m(3), w_m(3)]``.  Zero-noise dynamics::

    p' = v
    v' = R (a_m - b_a) - g e3
    R' = R [w_m - b_w]x

GPS measurement: ``z = p + R p_ip``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import polytraj, quadflat
from .obsgram import NumericalFailure, SystemModel
from .rotations import quat_exp, quat_log, quat_mul, quat_normalize, rotmat, rotmat_to_quat, skew

GRAVITY = quadflat.GRAVITY
E3 = np.array([0.0, 0.0, 1.0])

STATE_DIM = 19
ERROR_DIM = 18

BLOCKS = {
    "position": slice(0, 3),
    "velocity": slice(3, 6),
    "attitude": slice(6, 9),
    "gyro_bias": slice(9, 12),
    "accel_bias": slice(12, 15),
    "lever_arm": slice(15, 18),
}
ERROR_LABELS = tuple(
    f"{name}_{axis}" for name in BLOCKS for axis in "xyz"
)


def block_indices(names) -> list[int]:
    """Error-state indices for a list of block names or integer indices."""
    out = []
    for n in names:
        if isinstance(n, (int, np.integer)):
            out.append(int(n))
        elif n in BLOCKS:
            out.extend(range(BLOCKS[n].start, BLOCKS[n].stop))
        elif n in ERROR_LABELS:
            out.append(ERROR_LABELS.index(n))
        else:
            raise KeyError(f"unknown state block {n!r}")
    return out


# -- state vector helpers (batched over the leading axis) -----------------

def split(x):
    x = np.asarray(x, float)
    return x[..., 0:3], x[..., 3:6], x[..., 6:10], x[..., 10:13], x[..., 13:16], x[..., 16:19]


def join(p, v, q, bw, ba, pip):
    return np.concatenate([p, v, q, bw, ba, pip], -1)


def retract(x, delta):
    p, v, q, bw, ba, pip = split(x)
    d = np.asarray(delta, float)
    qn = quat_normalize(quat_mul(q, quat_exp(d[..., 6:9])))
    return join(p + d[..., 0:3], v + d[..., 3:6], qn, bw + d[..., 9:12], ba + d[..., 12:15], pip + d[..., 15:18])


def difference(x, x_hat):
    """Error state ``x (-) x_hat`` so that ``retract(x_hat, difference(x, x_hat)) == x``."""
    p, v, q, bw, ba, pip = split(x)
    ph, vh, qh, bwh, bah, piph = split(x_hat)
    qi = qh * np.array([1.0, -1.0, -1.0, -1.0])
    dth = quat_log(quat_mul(qi, q))
    return np.concatenate([p - ph, v - vh, dth, bw - bwh, ba - bah, pip - piph], -1)


def flow(x, u):
    p, v, q, bw, ba, pip = split(x)
    u = np.asarray(u, float)
    R = rotmat(q)
    acc = np.einsum("...ij,...j->...i", R, u[..., 0:3] - ba) - GRAVITY * E3
    zero = np.zeros_like(p)
    return np.concatenate([v, acc, u[..., 3:6] - bw, zero, zero, zero], -1)


def flow_jacobian(x, u):
    """Continuous error-state dynamics matrix ``F``."""
    p, v, q, bw, ba, pip = split(x)
    u = np.asarray(u, float)
    R = rotmat(q)
    B = p.shape[:-1]
    F = np.zeros(B + (18, 18))
    eye = np.eye(3)
    F[..., 0:3, 3:6] = eye
    F[..., 3:6, 6:9] = -R @ skew(u[..., 0:3] - ba)
    F[..., 3:6, 12:15] = -R
    F[..., 6:9, 6:9] = -skew(u[..., 3:6] - bw)
    F[..., 6:9, 9:12] = -eye
    return F


def measure(x):
    p, v, q, bw, ba, pip = split(x)
    return p + np.einsum("...ij,...j->...i", rotmat(q), pip)


def measure_jacobian(x):
    p, v, q, bw, ba, pip = split(x)
    R = rotmat(q)
    B = p.shape[:-1]
    H = np.zeros(B + (3, 18))
    H[..., 0:3, 0:3] = np.eye(3)
    H[..., 0:3, 6:9] = -R @ skew(pip)
    H[..., 0:3, 15:18] = R
    return H


def system_model() -> SystemModel:
    return SystemModel(
        state_dim=STATE_DIM,
        error_dim=ERROR_DIM,
        meas_dim=3,
        flow=flow,
        measure=measure,
        flow_jacobian=flow_jacobian,
        measure_jacobian=measure_jacobian,
        retract=retract,
        labels=ERROR_LABELS,
    )


# -- domain types ----------------------------------------------------------

@dataclass
class NavState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p_ip: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_vector(self) -> np.ndarray:
        return join(*(np.asarray(a, float) for a in (self.p, self.v, self.q, self.b_w, self.b_a, self.p_ip)))

    @classmethod
    def from_vector(cls, x) -> "NavState":
        return cls(*(np.array(a) for a in split(x)))


@dataclass(frozen=True)
class ImuSample:
    a_m: np.ndarray
    w_m: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class GpsSample:
    z: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class NoiseParams:
    sigma_gps: float = 0.2
    sigma_accel: float = 0.02
    sigma_gyro: float = 0.002
    sigma_accel_bias: float = 1e-4
    sigma_gyro_bias: float = 1e-5

    def __post_init__(self):
        if min(self.sigma_gps, self.sigma_accel, self.sigma_gyro,
               self.sigma_accel_bias, self.sigma_gyro_bias) < 0:
            raise ValueError("noise parameters must be nonnegative")


def initial_covariance() -> np.ndarray:
    per_axis = [0.01, 0.01, np.deg2rad(1.0) ** 2, 0.02 ** 2, 0.1 ** 2, 0.2 ** 2]
    return np.diag(np.repeat(per_axis, 3))


def process_noise(noise: NoiseParams, dt: float) -> np.ndarray:
    q = np.zeros(18)
    q[3:6] = noise.sigma_accel ** 2
    q[6:9] = noise.sigma_gyro ** 2
    q[9:12] = noise.sigma_gyro_bias ** 2
    q[12:15] = noise.sigma_accel_bias ** 2
    return np.diag(q * dt)


def transition(F, dt):
    """Second-order discretization ``I + F dt + (F dt)^2 / 2`` (batched)."""
    Fd = F * dt
    return np.eye(F.shape[-1]) + Fd + 0.5 * Fd @ Fd


# -- filter ----------------------------------------------------------------

def _lagrange_weights(ts, t):
    w = np.ones(len(ts))
    for i, ti in enumerate(ts):
        for j, tj in enumerate(ts):
            if i != j:
                w[i] *= (t - tj) / (ti - tj)
    return w


class Ekf:
    """Error-state EKF driven by IMU samples with GPS position updates.

    Mean propagation interpolates the most recent IMU samples with a cubic
    (fewer samples at start-up) and integrates the kinematics with one RK4
    step per IMU interval.
    """

    HISTORY = 4

    def __init__(self, x0: NavState | np.ndarray, P0=None, noise: NoiseParams = NoiseParams(), t0: float = 0.0):
        x = x0.to_vector() if isinstance(x0, NavState) else np.asarray(x0, float).copy()
        self.x = x
        self.P = initial_covariance() if P0 is None else np.array(P0, float)
        self.noise = noise
        self.t = float(t0)
        self._hist: list[tuple[float, np.ndarray]] = []
        self.check_psd = False

    @property
    def state(self) -> NavState:
        return NavState.from_vector(self.x)

    def push_imu(self, imu: ImuSample) -> None:
        u = np.concatenate([np.asarray(imu.a_m, float), np.asarray(imu.w_m, float)])
        self._hist.append((float(imu.t), u))
        del self._hist[:-self.HISTORY]

    def _input_at(self, t):
        ts = np.array([h[0] for h in self._hist])
        us = np.stack([h[1] for h in self._hist])
        if len(ts) == 1:
            return us[0]
        return _lagrange_weights(ts, t) @ us

    def propagate(self, imu: ImuSample, dt: float) -> "Ekf":
        """Advance by ``dt`` to the timestamp of ``imu``."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        if not self._hist:
            self.push_imu(ImuSample(imu.a_m, imu.w_m, self.t))
        self.push_imu(ImuSample(imu.a_m, imu.w_m, self.t + dt))
        t0 = self.t
        p, v, q, bw, ba, pip = split(self.x)

        def deriv(t, pv, q):
            u = self._input_at(t)
            R = rotmat(q)
            acc = R @ (u[:3] - ba) - GRAVITY * E3
            w = u[3:] - bw
            qd = 0.5 * quat_mul(q, np.concatenate([[0.0], w]))
            return np.concatenate([pv[3:], acc]), qd

        pv = np.concatenate([p, v])
        k1, l1 = deriv(t0, pv, q)
        k2, l2 = deriv(t0 + dt / 2, pv + dt / 2 * k1, q + dt / 2 * l1)
        k3, l3 = deriv(t0 + dt / 2, pv + dt / 2 * k2, q + dt / 2 * l2)
        k4, l4 = deriv(t0 + dt, pv + dt * k3, q + dt * l3)
        pv = pv + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        qn = q + dt / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
        drift = abs(np.linalg.norm(qn) - 1.0)
        if drift > 1e-6:
            warnings.warn(f"quaternion norm drift {drift:.2e} before renormalization", RuntimeWarning)
        qn = qn / np.linalg.norm(qn)

        u_mid = self._input_at(t0 + dt / 2)
        F = flow_jacobian(self.x, u_mid)
        Phi = transition(F, dt)
        self.P = Phi @ self.P @ Phi.T + process_noise(self.noise, dt)
        self.P = 0.5 * (self.P + self.P.T)
        self.x = join(pv[:3], pv[3:], qn, bw, ba, pip)
        self.t = t0 + dt
        self._check()
        return self

    def predicted_measurement(self) -> np.ndarray:
        return measure(self.x)

    def update_gps(self, gps: GpsSample, sigma: float | None = None) -> "Ekf":
        sigma = self.noise.sigma_gps if sigma is None else sigma
        H = measure_jacobian(self.x)
        Rn = sigma ** 2 * np.eye(3)
        S = H @ self.P @ H.T + Rn
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("innovation covariance is not invertible") from exc
        PHt = self.P @ H.T
        K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
        r = np.asarray(gps.z, float) - self.predicted_measurement()
        self.x = retract(self.x, K @ r)
        IKH = np.eye(18) - K @ H
        self.P = IKH @ self.P @ IKH.T + K @ Rn @ K.T
        self.P = 0.5 * (self.P + self.P.T)
        self._check()
        return self

    def _check(self):
        if not np.all(np.isfinite(self.P)) or not np.all(np.isfinite(self.x)):
            raise NumericalFailure("filter state became non-finite")
        if self.check_psd:
            ev = np.linalg.eigvalsh(self.P)
            if ev[0] < -1e-9 * max(1.0, ev[-1]):
                raise NumericalFailure(f"covariance lost positive semidefiniteness ({ev[0]:.3e})")


# -- ground truth from the flatness map -------------------------------------

@dataclass(frozen=True)
class Calibration:
    b_w: tuple = (0.0, 0.0, 0.0)
    b_a: tuple = (0.0, 0.0, 0.0)
    p_ip: tuple = (0.0, 0.0, 0.0)


def truth_samples(pp: polytraj.PiecewisePolynomial, times, calib: Calibration = Calibration()):
    """Noise-free states ``(N, 19)`` and IMU inputs ``(N, 6)`` along a flat trajectory."""
    times = np.asarray(times, float)
    kin = quadflat.kinematics(polytraj.derivatives(pp, times, 4), times)
    N = len(times)
    q = rotmat_to_quat(kin["R"])
    bw = np.broadcast_to(np.asarray(calib.b_w, float), (N, 3))
    ba = np.broadcast_to(np.asarray(calib.b_a, float), (N, 3))
    pip = np.broadcast_to(np.asarray(calib.p_ip, float), (N, 3))
    X = join(kin["position"], kin["velocity"], q, bw, ba, pip)
    U = np.concatenate([kin["specific_force"] + ba, kin["omega"] + bw], -1)
    return X, U, kin


def sampled_trajectory(pp, step: float, calib: Calibration = Calibration()):
    from .obsgram import SampledTrajectory
    t = quadflat.sample_times(pp, step)
    X, U, _ = truth_samples(pp, t, calib)
    return SampledTrajectory(t, X, U)


def covariance_trace_cost(pp, noise: NoiseParams = NoiseParams(), selection=(),
                          imu_rate: float = 100.0, gps_rate: float = 5.0,
                          calib: Calibration = Calibration(), P0=None) -> float:
    """Integrated trace of the selected covariance block along ``pp``.

    The filter is linearized about the noise-free ground truth, so the
    cost depends on covariances only, never on a noise realization.
    """
    sel = list(selection)
    if not sel:
        return 0.0
    dt = 1.0 / imu_rate
    n = int(round(pp.duration * imu_rate))
    t = pp.t0 + dt * np.arange(n + 1)
    t[-1] = min(t[-1], pp.tf)
    X, U, _ = truth_samples(pp, t, calib)
    tm = 0.5 * (t[:-1] + t[1:])
    Xm, Um, _ = truth_samples(pp, tm, calib)
    Phis = transition(flow_jacobian(Xm, Um), dt)
    Q = process_noise(noise, dt)
    Hs = measure_jacobian(X)
    Rn = noise.sigma_gps ** 2 * np.eye(3)
    every = max(1, int(round(imu_rate / gps_rate)))
    P = initial_covariance() if P0 is None else np.array(P0, float)
    eye = np.eye(18)
    cost = 0.0
    for k in range(n):
        Phi = Phis[k]
        P = Phi @ P @ Phi.T + Q
        if (k + 1) % every == 0:
            H = Hs[k + 1]
            S = H @ P @ H.T + Rn
            K = np.linalg.solve(S, H @ P).T
            IKH = eye - K @ H
            P = IKH @ P @ IKH.T + K @ Rn @ K.T
        cost += np.trace(P[np.ix_(sel, sel)]) * dt
    return float(cost)
