"""Differential flatness map of a quadrotor.

Flat outputs are world position ``r = (x, y, z)`` (z up) and yaw ``psi``.
With thrust acceleration ``t = r'' + g e3`` the body axes are::

    z_b = t / |t|
    x_b = (y_c x z_b) / |y_c x z_b|,   y_c = (-sin psi, cos psi, 0)
    y_b = z_b x x_b

so the ZYX yaw of ``R = [x_b y_b z_b]`` equals ``psi``.  Body rates come
from ``[omega]x = R^T R'`` and angular acceleration from the skew part of
``R^T R''``.  The column derivatives are obtained by differentiating the
normalizations ``u = v/|v|`` analytically::

    u'  = (v' - (u.v') u) / |v|
    u'' = (v'' - r'' u - 2 (u.v') u') / |v|,   r'' = u'.v' + u.v''

which consumes jerk for ``omega`` and snap for ``omega_dot``.  Mass never
appears; thrust is reported as the thrust-to-weight ratio ``|t| / g``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import polytraj
from .rotations import rotmat_to_quat, vee

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])
SINGULAR_TOL = 1e-6


class FlatnessSingularityError(ValueError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class FlatOutput:
    """Flat outputs and derivatives: ``derivs[n]`` is the n-th derivative of [x, y, z, yaw]."""

    derivs: np.ndarray  # (5, 4) or (5, N, 4)

    def __post_init__(self):
        d = np.asarray(self.derivs, dtype=float)
        if d.shape[0] != 5 or d.shape[-1] != 4:
            raise ValueError("flat output needs derivative orders 0..4 of a 4-vector")
        object.__setattr__(self, "derivs", d)

    @classmethod
    def from_trajectory(cls, pp: polytraj.PiecewisePolynomial, t) -> "FlatOutput":
        if pp.k != 4:
            raise ValueError("quadrotor flat outputs need k = 4")
        return cls(polytraj.derivatives(pp, t, 4))


@dataclass(frozen=True)
class QuadrotorState:
    position: np.ndarray
    velocity: np.ndarray
    quaternion: np.ndarray  # body-to-world, Hamilton [w, x, y, z]
    rotation: np.ndarray


@dataclass(frozen=True)
class ControlSignals:
    twr: np.ndarray
    omega: np.ndarray
    omega_dot: np.ndarray


@dataclass(frozen=True)
class PhysicalLimits:
    twr_max: float = 1.5
    omega_max: float = np.pi
    omega_dot_max: float = 5 * np.pi

    def __post_init__(self):
        if min(self.twr_max, self.omega_max, self.omega_dot_max) <= 0:
            raise ValueError("physical limits must be strictly positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.twr_max, self.omega_max, self.omega_dot_max])


def _unit_derivs(v, dv, ddv):
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / r
    rd = np.sum(u * dv, -1, keepdims=True)
    du = (dv - rd * u) / r
    rdd = np.sum(du * dv, -1, keepdims=True) + np.sum(u * ddv, -1, keepdims=True)
    ddu = (ddv - rdd * u - 2 * rd * du) / r
    return u, du, ddu


def kinematics(derivs, times=None, g: float = GRAVITY) -> dict:
    """Full flatness map on batched derivatives ``(5, N, 4)``.

    Returns arrays keyed ``position, velocity, acceleration, R, twr, omega,
    omega_dot, specific_force`` (body-frame specific force ``R^T t``).
    """
    d = np.asarray(derivs, dtype=float)
    if d.ndim == 2:
        d = d[:, None, :]
    pos, vel, acc, jerk, snap = (d[n, :, :3] for n in range(5))
    psi, dpsi, ddpsi = d[0, :, 3], d[1, :, 3], d[2, :, 3]

    thrust = acc + g * E3
    tnorm = np.linalg.norm(thrust, axis=-1)
    bad = tnorm < SINGULAR_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        when = None if times is None else float(np.atleast_1d(times)[i])
        raise FlatnessSingularityError(f"thrust vector vanishes (free fall) at t={when}", when)
    zb, dzb, ddzb = _unit_derivs(thrust, jerk, snap)

    c, s = np.cos(psi)[:, None], np.sin(psi)[:, None]
    zero = np.zeros_like(c)
    yc = np.concatenate([-s, c, zero], -1)
    dyc = dpsi[:, None] * np.concatenate([-c, -s, zero], -1)
    ddyc = ddpsi[:, None] * np.concatenate([-c, -s, zero], -1) + dpsi[:, None] ** 2 * np.concatenate([s, -c, zero], -1)

    n = np.cross(yc, zb)
    dn = np.cross(dyc, zb) + np.cross(yc, dzb)
    ddn = np.cross(ddyc, zb) + 2 * np.cross(dyc, dzb) + np.cross(yc, ddzb)
    nn = np.linalg.norm(n, axis=-1)
    bad = nn < SINGULAR_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        when = None if times is None else float(np.atleast_1d(times)[i])
        raise FlatnessSingularityError(f"heading undefined (thrust axis horizontal) at t={when}", when)
    xb, dxb, ddxb = _unit_derivs(n, dn, ddn)
    yb = np.cross(zb, xb)
    dyb = np.cross(dzb, xb) + np.cross(zb, dxb)
    ddyb = np.cross(ddzb, xb) + 2 * np.cross(dzb, dxb) + np.cross(zb, ddxb)

    R = np.stack([xb, yb, zb], -1)
    dR = np.stack([dxb, dyb, dzb], -1)
    ddR = np.stack([ddxb, ddyb, ddzb], -1)
    Rt = np.swapaxes(R, -1, -2)
    W = Rt @ dR
    omega = vee(0.5 * (W - np.swapaxes(W, -1, -2)))
    A = Rt @ ddR
    omega_dot = vee(0.5 * (A - np.swapaxes(A, -1, -2)))
    return {
        "position": pos,
        "velocity": vel,
        "acceleration": acc,
        "R": R,
        "twr": tnorm / g,
        "omega": omega,
        "omega_dot": omega_dot,
        "specific_force": np.einsum("nji,nj->ni", R, thrust),
    }


def flat_to_state(fo: FlatOutput) -> QuadrotorState:
    kin = kinematics(fo.derivs)
    single = fo.derivs.ndim == 2
    pick = (lambda a: a[0]) if single else (lambda a: a)
    q = rotmat_to_quat(kin["R"])
    return QuadrotorState(pick(kin["position"]), pick(kin["velocity"]), pick(q), pick(kin["R"]))


def flat_to_controls(fo: FlatOutput) -> ControlSignals:
    kin = kinematics(fo.derivs)
    single = fo.derivs.ndim == 2
    pick = (lambda a: a[0]) if single else (lambda a: a)
    return ControlSignals(pick(kin["twr"]), pick(kin["omega"]), pick(kin["omega_dot"]))


def sample_times(pp: polytraj.PiecewisePolynomial, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("sample step must be positive")
    n = max(2, int(np.ceil(pp.duration / dt - 1e-9)) + 1)
    return np.linspace(pp.t0, pp.tf, n)


def constraint_margins(pp, limits: PhysicalLimits = PhysicalLimits(), sample_dt: float = 0.02,
                       g: float = GRAVITY) -> np.ndarray:
    """Margins ``(twr_max - twr, omega_max - |omega|, omega_dot_max - |omega_dot|)``.

    Shape ``(N, 3)`` on a uniform grid covering both endpoints.  The
    trajectory is feasible at that resolution iff every entry is >= 0.
    """
    t = sample_times(pp, sample_dt)
    kin = kinematics(polytraj.derivatives(pp, t, 4), t, g)
    return np.stack([
        limits.twr_max - kin["twr"],
        limits.omega_max - np.linalg.norm(kin["omega"], axis=-1),
        limits.omega_dot_max - np.linalg.norm(kin["omega_dot"], axis=-1),
    ], -1)
