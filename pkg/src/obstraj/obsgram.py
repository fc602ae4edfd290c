"""Nonlinear observability: Lie derivatives, observability matrices and Gramians.

Every model callable is batched over a leading axis: ``x`` has shape
``(B, state_dim)`` and ``u`` has shape ``(B, input_dim)``.  Gradients are
taken with respect to the minimal error state (attitude as a 3-vector), so
the model supplies a retraction ``x (+) delta`` and the error-state dynamics
Jacobian ``F`` alongside the flow ``f`` written in error-state coordinates.

The gradient recursion differentiates ``L_{i+1} = grad(L_i) . f`` as::

    grad(L_{i+1}) = D_f[grad(L_i)] + grad(L_i) @ F

where ``D_f`` is the derivative of ``grad(L_i)`` along the flow, evaluated by
a central difference at ``x (+) (+-s f)``.  The recursion is exact for
vector-space states and for multiplicative attitude errors alike, because
``F`` already carries the transport of the error frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

RANK_TEST_RTOL = 1e-8


# central step along the flow for nested Lie differences; balances truncation
# against roundoff up to third order
LIE_STEP = 3e-3


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemModel:
    state_dim: int
    error_dim: int
    meas_dim: int
    flow: Callable  # (x, u) -> (B, error_dim)
    measure: Callable  # x -> (B, meas_dim)
    flow_jacobian: Callable  # (x, u) -> (B, error_dim, error_dim)
    measure_jacobian: Callable  # x -> (B, meas_dim, error_dim)
    retract: Callable  # (x, delta) -> x
    labels: tuple = ()

    def state_labels(self) -> tuple:
        return self.labels or tuple(f"x{i}" for i in range(self.error_dim))


@dataclass(frozen=True)
class LieStack:
    values: tuple  # L_0..L_n, each (B, meas_dim)
    gradients: tuple  # grad L_0..grad L_n, each (B, meas_dim, error_dim)

    @property
    def order(self) -> int:
        return len(self.gradients) - 1

    def scaled(self, alpha: float) -> "LieStack":
        return LieStack(tuple(alpha * v for v in self.values), tuple(alpha * g for g in self.gradients))


@dataclass(frozen=True)
class GramianConfig:
    taylor_order: int = 2
    horizon: float = 1.0
    step: float = 0.05
    epsilon: float = 1e-6
    quadrature: str = "simpson"

    def __post_init__(self):
        if self.taylor_order < 1:
            raise ValueError("Taylor order must be >= 1")
        if min(self.horizon, self.step, self.epsilon) <= 0:
            raise ValueError("horizon, step and epsilon must be positive")
        if self.quadrature not in ("simpson", "trapezoid"):
            raise ValueError("quadrature must be 'simpson' or 'trapezoid'")


@dataclass(frozen=True)
class SampledTrajectory:
    """States and inputs on a uniform time grid."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray

    def __len__(self):
        return len(self.times)

    def head(self, n: int) -> "SampledTrajectory":
        return SampledTrajectory(self.times[:n], self.states[:n], self.inputs[:n])


@dataclass(frozen=True)
class Gramian:
    matrix: np.ndarray
    t0: float
    T: float
    labels: tuple = field(default=(), compare=False)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def rank(self, rtol: float = RANK_TEST_RTOL) -> int:
        s = np.linalg.svd(self.matrix, compute_uv=False)
        return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0

    def to_dict(self, selection: Sequence[int] | None = None) -> dict:
        sel = list(range(self.matrix.shape[0])) if selection is None else list(selection)
        labels = self.labels or tuple(f"x{i}" for i in range(self.matrix.shape[0]))
        return {
            "t0": self.t0,
            "T": self.T,
            "labels": list(labels),
            "matrix": self.matrix.tolist(),
            "eigenvalues": self.eigenvalues().tolist(),
            "rank": self.rank(),
            "selection": sel,
            "selection_labels": [labels[i] for i in sel],
            "sigma_min": observability_measure(self, sel),
        }


def _batch(a) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a[None], True
    return a, False


def _flow_steps(model, x, u, step):
    f = model.flow(x, u)
    fnorm = np.linalg.norm(f, axis=-1, keepdims=True)
    s = step / np.maximum(fnorm, 1.0)
    return f, s


def _gradients(model: SystemModel, x, u, n: int, step: float) -> list:
    if n == 0:
        return [model.measure_jacobian(x)]
    B = x.shape[0]
    f, s = _flow_steps(model, x, u, step)
    xs = np.concatenate([x, model.retract(x, s * f), model.retract(x, -s * f)])
    us = np.concatenate([u, u, u])
    lower = _gradients(model, xs, us, n - 1, step)
    g = lower[-1]
    along = (g[B:2 * B] - g[2 * B:]) / (2.0 * s[:, :, None])
    top = along + g[:B] @ model.flow_jacobian(x, u)
    return [lg[:B] for lg in lower] + [top]


def lie_derivatives(model: SystemModel, x, u, n: int, step: float = LIE_STEP) -> LieStack:
    """Lie derivatives ``L_0..L_n`` of the sensor model along the zero-noise flow."""
    if n < 0:
        raise ValueError("order must be nonnegative")
    x, _ = _batch(x)
    u, _ = _batch(u)
    grads = _gradients(model, x, u, n, step)
    f = model.flow(x, u)
    values = [model.measure(x)]
    for i in range(n):
        values.append(np.einsum("bpn,bn->bp", grads[i], f))
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite Lie derivative gradient at order {i}")
    return LieStack(tuple(values), tuple(grads))


def taylor_jacobian(stack: LieStack, dt: float) -> np.ndarray:
    """``K = sum_i dt**i / i! * grad(L_i)``: predicted measurement Jacobian ``dt`` ahead."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    K = np.zeros_like(stack.gradients[0])
    for i, g in enumerate(stack.gradients):
        K = K + (dt ** i / math.factorial(i)) * g
    return K


def quadrature_weights(n: int, h: float, rule: str = "simpson") -> np.ndarray:
    """Nonnegative weights for ``n`` uniform samples with spacing ``h``.

    Simpson's rule on the largest odd-length prefix, trapezoid on a
    trailing interval when ``n`` is even.
    """
    if n < 1:
        raise ValueError("empty trajectory")
    w = np.zeros(n)
    if n == 1:
        return w
    if rule == "trapezoid" or n == 2:
        w[:] = h
        w[0] = w[-1] = h / 2
        return w
    m = n if n % 2 == 1 else n - 1
    w[:m:2] = 2 * h / 3
    w[1:m:2] = 4 * h / 3
    w[0] = w[m - 1] = h / 3
    if m < n:
        w[m - 1] += h / 2
        w[m] += h / 2
    return w


def _weights_for(traj: SampledTrajectory, cfg: GramianConfig) -> np.ndarray:
    t = np.asarray(traj.times, float)
    if len(t) < 2:
        raise ValueError("trajectory needs at least two samples")
    h = float(t[1] - t[0])
    if not np.allclose(np.diff(t), h, rtol=1e-6, atol=1e-12):
        raise ValueError("trajectory samples must be uniform")
    return quadrature_weights(len(t), h, cfg.quadrature)


def gramian_integrand(model: SystemModel, traj: SampledTrajectory, cfg: GramianConfig,
                      step: float = LIE_STEP) -> np.ndarray:
    """Per-sample ``K^T K`` with ``K`` the Taylor Jacobian a horizon ahead, shape (N, n, n)."""
    stack = lie_derivatives(model, traj.states, traj.inputs, cfg.taylor_order, step)
    K = taylor_jacobian(stack, cfg.horizon)
    return np.einsum("bpi,bpj->bij", K, K)


def approx_gramian(model: SystemModel, traj: SampledTrajectory, cfg: GramianConfig = GramianConfig(),
                   step: float = LIE_STEP) -> Gramian:
    """Gramian approximated from the Taylor-expanded measurement Jacobian."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    w = _weights_for(traj, cfg)
    M = np.einsum("b,bij->ij", w, gramian_integrand(model, traj, cfg, step))
    M = 0.5 * (M + M.T)
    return Gramian(M, float(traj.times[0]), float(traj.times[-1] - traj.times[0]), model.labels)


def simulate(model: SystemModel, x0, traj: SampledTrajectory, substeps: int = 1) -> np.ndarray:
    """RK4 on the retraction, inputs linearly interpolated.  Returns states (N, B, state_dim)."""
    x, _ = _batch(x0)
    B = x.shape[0]
    t = traj.times
    out = [x]
    for k in range(len(t) - 1):
        dt = (t[k + 1] - t[k]) / substeps
        for j in range(substeps):
            a = j / substeps
            u0 = (1 - a) * traj.inputs[k] + a * traj.inputs[k + 1]
            a1 = (j + 1) / substeps
            u1 = (1 - a1) * traj.inputs[k] + a1 * traj.inputs[k + 1]
            um = 0.5 * (u0 + u1)
            U0, Um, U1 = (np.broadcast_to(v, (B, v.shape[-1])) for v in (u0, um, u1))
            k1 = model.flow(x, U0)
            k2 = model.flow(model.retract(x, 0.5 * dt * k1), Um)
            k3 = model.flow(model.retract(x, 0.5 * dt * k2), Um)
            k4 = model.flow(model.retract(x, dt * k3), U1)
            x = model.retract(x, dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"simulation diverged at t={t[k + 1]}")
        out.append(x)
    return np.stack(out)


def empirical_gramian(model: SystemModel, traj: SampledTrajectory, cfg: GramianConfig = GramianConfig(),
                      substeps: int = 1) -> Gramian:
    """Empirical Gramian from +-epsilon initial-state perturbations."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    w = _weights_for(traj, cfg)
    n, eps = model.error_dim, cfg.epsilon
    x0 = np.asarray(traj.states[0], float)
    deltas = np.concatenate([eps * np.eye(n), -eps * np.eye(n)])
    starts = model.retract(np.broadcast_to(x0, (2 * n, x0.size)), deltas)
    states = simulate(model, starts, traj, substeps)  # (N, 2n, nx)
    N = states.shape[0]
    z = model.measure(states.reshape(N * 2 * n, -1)).reshape(N, 2 * n, -1)
    dz = z[:, :n] - z[:, n:]  # (N, n, p)
    M = np.einsum("t,tip,tjp->ij", w, dz, dz) / (4 * eps ** 2)
    M = 0.5 * (M + M.T)
    return Gramian(M, float(traj.times[0]), float(traj.times[-1] - traj.times[0]), model.labels)


def observability_measure(W, selection: Sequence[int]) -> float:
    """Smallest singular value of the principal submatrix on ``selection``."""
    M = W.matrix if isinstance(W, Gramian) else np.asarray(W, float)
    sel = list(selection)
    if not sel:
        raise ValueError("selection must be nonempty")
    if len(set(sel)) != len(sel) or min(sel) < 0 or max(sel) >= M.shape[0]:
        raise ValueError("selection indices must be unique and in range")
    sub = M[np.ix_(sel, sel)]
    return float(np.linalg.svd(sub, compute_uv=False)[-1])


def observability_matrix(stack: LieStack) -> np.ndarray:
    """Stack ``[grad L_0; grad L_1; ...]`` for every sample into one matrix."""
    G = np.stack(stack.gradients, axis=1)  # (B, n+1, p, N)
    return G.reshape(-1, G.shape[-1])


def rank_test(O: np.ndarray, rtol: float = RANK_TEST_RTOL) -> dict:
    O = np.asarray(O, float)
    s = np.linalg.svd(O, compute_uv=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    return {"rank": rank, "observable": rank == O.shape[1], "singular_values": s.tolist()}
