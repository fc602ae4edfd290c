"""Constrained optimization over null-space weights.

Three objectives share one driver: observability (minimize ``-sigma_min`` of
the approximated Gramian on a state selection), covariance trace, and
minimum snap.  Physical limits enter as sampled inequality constraints,
normalized by their limit values.  The inner solver is SLSQP (SQP with a
BFGS Hessian and an l1 merit line search); the driver adds feasibility
restoration, acceptance bookkeeping and termination on step size.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import gpsimu, obsgram, polytraj, quadflat
from .quadflat import FlatnessSingularityError, PhysicalLimits

SINGULAR_PENALTY = 1e6
MARGIN_TOL = 1e-6
STEP_PATIENCE = 3
OBJECTIVES = ("observability", "covariance_trace", "min_snap")


class _Converged(Exception):
    """Raised from the SLSQP callback to stop on a small step."""


class InfeasibleProblemError(RuntimeError):
    def __init__(self, message, worst_margin):
        super().__init__(message)
        self.worst_margin = worst_margin


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "observability"
    selection: tuple = ()
    gramian: obsgram.GramianConfig = obsgram.GramianConfig()
    noise: gpsimu.NoiseParams = gpsimu.NoiseParams()
    calibration: gpsimu.Calibration = gpsimu.Calibration()
    snap_dims: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind != "min_snap" and not self.selection:
            raise ValueError(f"{self.kind} objective needs a state selection")
        object.__setattr__(self, "selection", tuple(int(i) for i in self.selection))


@dataclass
class OptProblem:
    space: polytraj.TrajectorySpace
    objective: ObjectiveSpec
    limits: PhysicalLimits = PhysicalLimits()
    sample_dt: float = 0.02
    w0: np.ndarray | None = None
    max_iter: int = 200
    step_tol: float = 1e-6
    ftol: float = 1e-8
    constrained: bool = True

    def __post_init__(self):
        self.w0 = np.zeros(self.space.m) if self.w0 is None else np.asarray(self.w0, float)
        if self.w0.shape != (self.space.m,):
            raise ValueError(f"w0 must have dimension {self.space.m}")


@dataclass
class OptResult:
    weights: np.ndarray
    objective: float
    objective_history: list
    violation_history: list
    iterations: int
    wall_time: float
    initial_objective: float
    message: str = ""
    evaluations: int = 0
    restored: bool = False

    def to_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "objective_history": [float(v) for v in self.objective_history],
            "violation_history": [float(v) for v in self.violation_history],
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "restored": self.restored,
            "message": self.message,
            "wall_time": self.wall_time,
        }


# -- objectives -------------------------------------------------------------

def _snap_gram(pp: polytraj.PiecewisePolynomial, dims) -> np.ndarray:
    """Block-diagonal ``Q`` with ``snap(pp) = x^T Q x`` for ``x = pp.to_vector()``."""
    d, k = pp.d, pp.k
    n = pp.q * k * (d + 1)
    Q = np.zeros((n, n))
    if d < 4:
        return Q
    p = np.arange(d + 1)
    fall = polytraj._falling(p, 4)
    e = np.clip(p - 4, 0, None)
    for i in range(pp.q):
        h = pp.knots[i + 1] - pp.knots[i]
        ee = e[:, None] + e[None, :] + 1
        block = np.outer(fall, fall) * h ** ee / ee
        for j in dims:
            if j < k:
                o = (i * k + j) * (d + 1)
                Q[o:o + d + 1, o:o + d + 1] = block
    return Q


def snap_cost(pp: polytraj.PiecewisePolynomial, dims: Sequence[int] = (0, 1, 2)) -> float:
    """Exact integral of the squared 4th derivative summed over ``dims``."""
    d = pp.d
    if d < 4:
        return 0.0
    p = np.arange(d + 1)
    fall = polytraj._falling(p, 4)[4:]  # coefficients of tau**(p-4)
    e = np.arange(d - 3)
    ee = e[:, None] + e[None, :] + 1
    dims = [j for j in dims if j < pp.k]
    total = 0.0
    for i in range(pp.q):
        h = pp.knots[i + 1] - pp.knots[i]
        s = pp.coeffs[i][dims][:, 4:] * fall
        total += float(np.einsum("ja,ab,jb->", s, h ** ee / ee, s))
    return total


def snap_quadratic(space: polytraj.TrajectorySpace, dims=(0, 1, 2)):
    """``(H, c, r)`` with ``snap(space.trajectory(w)) = w^T H w + c^T w + r``."""
    base = space.particular()
    x0 = base.to_vector()
    B = np.stack([polytraj.time_scale(b, 1.0 / space.scale).to_vector() for b in space.param.basis])
    Q = _snap_gram(base, dims)
    QB = Q @ B.T
    return B @ QB, 2 * x0 @ QB, float(x0 @ Q @ x0)


def min_snap_weights(space: polytraj.TrajectorySpace, dims=(0, 1, 2)) -> np.ndarray:
    """Unconstrained minimum-snap weights, least-norm where snap is flat."""
    H, c, _ = snap_quadratic(space, dims)
    return np.linalg.lstsq(2 * H, -c, rcond=1e-12)[0]


def _observability(pp, spec: ObjectiveSpec) -> float:
    traj = gpsimu.sampled_trajectory(pp, spec.gramian.step, spec.calibration)
    W = obsgram.approx_gramian(gpsimu.system_model(), traj, spec.gramian)
    return -obsgram.observability_measure(W, spec.selection)


def evaluate_objective(spec: ObjectiveSpec, pp) -> float:
    if spec.kind == "min_snap":
        return snap_cost(pp, spec.snap_dims)
    if spec.kind == "observability":
        return _observability(pp, spec)
    return gpsimu.covariance_trace_cost(pp, spec.noise, spec.selection, calib=spec.calibration)


def objective_value(problem: OptProblem, w) -> float:
    """Objective at weights ``w``; flatness singularities get a large penalty."""
    w = np.asarray(w, float)
    if w.shape != (problem.space.m,):
        raise ValueError(f"expected {problem.space.m} weights")
    pp = problem.space.trajectory(w)
    try:
        return float(evaluate_objective(problem.objective, pp))
    except FlatnessSingularityError:
        return SINGULAR_PENALTY


def _fd_steps(w, rel=1e-4):
    return rel * np.maximum(1.0, np.abs(w))


def gradient(problem: OptProblem, w, rel_step: float = 1e-4) -> np.ndarray:
    """Central finite differences, one-sided where a stencil point is non-finite."""
    w = np.asarray(w, float)
    h = _fd_steps(w, rel_step)
    g = np.zeros_like(w)
    f0 = None
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h[i]
        fp = objective_value(problem, w + e)
        fm = objective_value(problem, w - e)
        if math.isfinite(fp) and math.isfinite(fm):
            g[i] = (fp - fm) / (2 * h[i])
            continue
        if f0 is None:
            f0 = objective_value(problem, w)
        if math.isfinite(fp):
            g[i] = (fp - f0) / h[i]
        elif math.isfinite(fm):
            g[i] = (f0 - fm) / h[i]
        else:
            g[i] = 0.0
    return g


def margins(problem: OptProblem, w) -> np.ndarray:
    """Normalized margins ``margin / limit``, flattened; large negative on singularity."""
    pp = problem.space.trajectory(w)
    try:
        mg = quadflat.constraint_margins(pp, problem.limits, problem.sample_dt)
    except FlatnessSingularityError:
        n = len(quadflat.sample_times(pp, problem.sample_dt))
        return np.full(3 * n, -10.0)
    return (mg / problem.limits.as_array()).reshape(-1)


def raw_min_margin(problem: OptProblem, w) -> float:
    pp = problem.space.trajectory(w)
    try:
        return float(quadflat.constraint_margins(pp, problem.limits, problem.sample_dt).min())
    except FlatnessSingularityError:
        return -math.inf


def _margin_jacobian(problem, w):
    return _fd_jacobian(lambda v: margins(problem, v), np.asarray(w, float))


def _fd_gradient(fun, w):
    h = _fd_steps(w)
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h[i]
        g[i] = (fun(w + e) - fun(w - e)) / (2 * h[i])
    return g


def _fd_jacobian(fun, w):
    h = _fd_steps(w)
    cols = []
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h[i]
        cols.append((np.asarray(fun(w + e)) - np.asarray(fun(w - e))) / (2 * h[i]))
    return np.stack(cols, axis=1)


def _restore(cons, cons_jac, w):
    """Drive all constraint values nonnegative by minimizing squared violation."""

    def violation(v):
        g = cons(v)
        return float(np.sum(np.minimum(g - 1e-4, 0.0) ** 2))

    def vgrad(v):
        return 2 * cons_jac(v).T @ np.minimum(cons(v) - 1e-4, 0.0)

    res = minimize(violation, w, jac=vgrad, method="L-BFGS-B",
                   options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-12})
    return res.x


def solve(fun, w0, *, grad=None, cons=None, cons_jac=None, worst_margin=None,
          max_iter: int = 200, step_tol: float = 1e-6, ftol: float = 1e-8) -> OptResult:
    """Minimize ``fun`` subject to ``cons(w) >= 0`` elementwise.

    ``cons`` should be well scaled (order one); ``worst_margin`` reports the
    unscaled worst margin used to accept iterates and defaults to
    ``min(cons(w))``.  Restoration runs first when ``min(cons(w0)) < -0.2``.
    """
    start = time.perf_counter()
    w = np.array(w0, float)
    grad = grad or (lambda v: _fd_gradient(fun, v))
    constrained = cons is not None
    if constrained:
        cons_jac = cons_jac or (lambda v: _fd_jacobian(cons, v))
        worst_margin = worst_margin or (lambda v: float(np.min(cons(v))))
    restored = False
    if constrained and np.min(cons(w)) < -0.2:
        w = _restore(cons, cons_jac, w)
        restored = True
        if worst_margin(w) < -MARGIN_TOL and np.min(cons(w)) < 0:
            worst = worst_margin(w)
            raise InfeasibleProblemError(f"no feasible point found (worst margin {worst:.4g})", worst)

    counter = {"n": 0}

    def f(v):
        counter["n"] += 1
        return fun(v)

    f_init = f(w)
    scale = max(abs(f_init), 1e-12)
    best_w, best_f = None, math.inf
    obj_hist, viol_hist = [], []

    def consider(v, fv=None):
        nonlocal best_w, best_f
        fv = f(v) if fv is None else fv
        worst = worst_margin(v) if constrained else 0.0
        if worst >= -MARGIN_TOL and fv <= best_f:
            best_w, best_f = np.array(v, copy=True), fv
            obj_hist.append(fv)
            viol_hist.append(max(0.0, -worst))

    consider(w, f_init)
    state = {"prev": w.copy(), "iters": 0, "msg": "", "small": 0}

    def callback(xk, *args):
        state["iters"] += 1
        consider(xk)
        step = float(np.linalg.norm(xk - state["prev"]))
        state["prev"] = np.array(xk, copy=True)
        # SLSQP returns an occasional null step when it resets its Hessian
        state["small"] = state["small"] + 1 if step < step_tol else 0
        if state["small"] >= STEP_PATIENCE:
            state["msg"] = "step norm below tolerance"
            raise _Converged

    constraints = []
    if constrained:
        constraints = [{"type": "ineq", "fun": lambda v: cons(v) - 0.1 * MARGIN_TOL, "jac": cons_jac}]
    final_x, nit, message = w, 0, ""
    try:
        res = minimize(
            lambda v: f(v) / scale,
            w,
            jac=lambda v: grad(v) / scale,
            method="SLSQP",
            constraints=constraints,
            callback=callback,
            options={"maxiter": max_iter, "ftol": ftol},
        )
        final_x, nit, message = res.x, int(getattr(res, "nit", 0) or 0), str(res.message)
    except _Converged:
        final_x = state["prev"]
    consider(final_x)
    if best_w is None:
        worst = worst_margin(final_x)
        raise InfeasibleProblemError(f"optimizer found no feasible iterate (worst margin {worst:.4g})", worst)
    return OptResult(
        weights=best_w,
        objective=best_f,
        objective_history=obj_hist,
        violation_history=viol_hist,
        iterations=max(state["iters"], nit),
        wall_time=time.perf_counter() - start,
        initial_objective=f_init,
        message=state["msg"] or message,
        evaluations=counter["n"],
        restored=restored,
    )


def optimize(problem: OptProblem) -> OptResult:
    kw = {}
    if problem.constrained:
        kw = {
            "cons": lambda v: margins(problem, v),
            "cons_jac": lambda v: _margin_jacobian(problem, v),
            "worst_margin": lambda v: raw_min_margin(problem, v),
        }
    return solve(lambda v: objective_value(problem, v), problem.w0, grad=lambda v: gradient(problem, v),
                 max_iter=problem.max_iter, step_tol=problem.step_tol, ftol=problem.ftol, **kw)
