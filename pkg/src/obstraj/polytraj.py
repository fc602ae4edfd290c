"""Constrained piecewise polynomials in flat-output space.

A trajectory is a ``k``-dimensional, degree-``d`` piecewise polynomial with
``q`` pieces on knots ``t_0 < ... < t_q``.  Each piece ``i`` is stored as a
``k x (d+1)`` coefficient matrix in *local* time ``tau = t - t_{i-1}``::

    y(t) = P_i @ [1, tau, tau**2, ..., tau**d]

Endpoint, waypoint and continuity constraints are assembled into a linear
system ``A @ x = b`` over the stacked unknown vector ``x``.  The stacking is
piece-major, then dimension, then coefficient power::

    x[(i * k + j) * (d + 1) + p] = P_i[j, p]

The minimum-norm solution of the system and an orthonormal basis of its null
space together form the decision space of the trajectory optimizer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

RANK_RTOL = 1e-10
CONSISTENCY_RTOL = 1e-8


class OutOfDomainError(ValueError):
    """Evaluation time lies outside the trajectory's knot span."""


class InfeasibleConstraintsError(ValueError):
    """The constraint system has no exact solution."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _falling(p: np.ndarray, n: int) -> np.ndarray:
    """Falling factorial p*(p-1)*...*(p-n+1), zero where p < n."""
    out = np.ones_like(p, dtype=float)
    for r in range(n):
        out = out * (p - r)
    return np.where(p >= n, out, 0.0)


def basis_row(tau: float | np.ndarray, d: int, order: int) -> np.ndarray:
    """Row vector of the ``order``-th derivative of ``[1, tau, ..., tau**d]``."""
    tau = np.asarray(tau, dtype=float)
    p = np.arange(d + 1)
    coef = _falling(p, order)
    expo = np.clip(p - order, 0, None)
    return coef * np.power(tau[..., None], expo)


@dataclass(frozen=True)
class PiecewisePolynomial:
    knots: np.ndarray
    coeffs: np.ndarray  # (q, k, d+1)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 3:
            raise ValueError("coeffs must have shape (q, k, d+1)")
        if knots.ndim != 1 or len(knots) != coeffs.shape[0] + 1:
            raise ValueError("need q+1 knots for q coefficient matrices")
        if coeffs.shape[0] < 1:
            raise ValueError("at least one piece is required")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        coeffs.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def q(self) -> int:
        return self.coeffs.shape[0]

    @property
    def k(self) -> int:
        return self.coeffs.shape[1]

    @property
    def d(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def t0(self) -> float:
        return float(self.knots[0])

    @property
    def tf(self) -> float:
        return float(self.knots[-1])

    @property
    def duration(self) -> float:
        return self.tf - self.t0

    def piece_index(self, t: np.ndarray) -> np.ndarray:
        # Right-hand piece at interior knots; the final knot belongs to the last piece.
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return np.clip(idx, 0, self.q - 1)

    def __call__(self, t, order: int = 0) -> np.ndarray:
        return evaluate(self, t, order)

    def to_vector(self) -> np.ndarray:
        return self.coeffs.reshape(-1).copy()

    @classmethod
    def from_vector(cls, knots, x, k: int, d: int) -> "PiecewisePolynomial":
        q = len(knots) - 1
        return cls(np.asarray(knots, float), np.asarray(x, float).reshape(q, k, d + 1))


def evaluate(pp: PiecewisePolynomial, t, order: int = 0) -> np.ndarray:
    """Evaluate the ``order``-th time derivative at scalar or array ``t``.

    Returns shape ``(k,)`` for scalar ``t`` and ``(len(t), k)`` otherwise.
    """
    if order < 0:
        raise ValueError("derivative order must be nonnegative")
    t_arr = np.asarray(t, dtype=float)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    span = max(1.0, abs(pp.tf))
    if np.any(t_arr < pp.t0 - 1e-12 * span) or np.any(t_arr > pp.tf + 1e-12 * span):
        raise OutOfDomainError(
            f"t outside [{pp.t0}, {pp.tf}]: {t_arr[(t_arr < pp.t0) | (t_arr > pp.tf)][:3]}"
        )
    idx = pp.piece_index(t_arr)
    tau = t_arr - pp.knots[idx]
    rows = basis_row(tau, pp.d, order)  # (n, d+1)
    out = np.einsum("nkp,np->nk", pp.coeffs[idx], rows)
    return out[0] if scalar else out


def derivatives(pp: PiecewisePolynomial, t, max_order: int) -> np.ndarray:
    """Stack of derivatives 0..max_order, shape ``(max_order+1, len(t), k)``."""
    return np.stack([evaluate(pp, np.atleast_1d(t), n) for n in range(max_order + 1)])


def time_scale(pp: PiecewisePolynomial, s: float) -> PiecewisePolynomial:
    """Return ``pp'`` with ``pp'(s * t) == pp(t)``; the n-th derivative scales by ``s**-n``."""
    if s <= 0:
        raise ValueError("time scale must be positive")
    powers = np.power(float(s), -np.arange(pp.d + 1))
    return PiecewisePolynomial(pp.knots * s, pp.coeffs * powers)


def add(a: PiecewisePolynomial, b: PiecewisePolynomial, alpha: float = 1.0) -> PiecewisePolynomial:
    """``a + alpha * b`` on identical knots."""
    if a.coeffs.shape != b.coeffs.shape or not np.allclose(a.knots, b.knots):
        raise ValueError("polynomials must share knots and shape")
    return PiecewisePolynomial(a.knots, a.coeffs + alpha * b.coeffs)


@dataclass(frozen=True)
class TrajectoryConstraint:
    """Fix the ``order``-th derivative at knot time ``time``.

    Entries of ``value`` that are NaN leave that dimension free.
    """

    time: float
    order: int
    value: tuple

    def __post_init__(self):
        object.__setattr__(self, "value", tuple(float(v) for v in np.atleast_1d(self.value)))
        if self.order < 0:
            raise ValueError("constraint order must be nonnegative")


@dataclass(frozen=True)
class ConstraintSystem:
    A: np.ndarray  # (equations, unknowns)
    b: np.ndarray
    k: int
    d: int
    knots: np.ndarray
    continuity: int
    labels: tuple = field(default=(), compare=False)

    @property
    def unknowns(self) -> int:
        return self.A.shape[1]

    @property
    def equations(self) -> int:
        return self.A.shape[0]

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.A, compute_uv=False)

    def rank(self) -> int:
        s = self.singular_values()
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > RANK_RTOL * s[0]))

    def condition_number(self) -> float:
        s = self.singular_values()
        r = self.rank()
        return float(s[0] / s[r - 1]) if r else math.inf

    def residual(self, pp: PiecewisePolynomial, homogeneous: bool = False) -> float:
        """Max absolute constraint residual of ``pp``."""
        x = pp.to_vector()
        rhs = 0.0 if homogeneous else self.b
        return float(np.max(np.abs(self.A @ x - rhs), initial=0.0))


def _unknown_index(i: int, j: int, k: int, d: int) -> int:
    return (i * k + j) * (d + 1)


def build_constraint_system(
    constraints: Sequence[TrajectoryConstraint],
    continuity: int,
    k: int,
    d: int,
    knots: Sequence[float],
) -> ConstraintSystem:
    """Assemble endpoint/waypoint constraints plus C^continuity smoothness at interior knots."""
    knots = np.asarray(knots, dtype=float)
    q = len(knots) - 1
    if q < 1:
        raise ValueError("need at least two knots")
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be strictly increasing")
    if not 0 <= continuity <= d:
        raise ValueError("continuity order must lie in [0, d]")
    n_unknown = q * k * (d + 1)
    rows, rhs, labels = [], [], []
    tol = 1e-9 * max(1.0, float(np.max(np.abs(knots))))
    for c in constraints:
        hits = np.nonzero(np.abs(knots - c.time) <= tol)[0]
        if hits.size == 0:
            raise ValueError(f"constraint time {c.time} is not a knot")
        if c.order > d:
            raise ValueError(f"constraint order {c.order} exceeds degree {d}")
        if len(c.value) != k:
            raise ValueError(f"constraint value has {len(c.value)} entries, expected {k}")
        knot = int(hits[0])
        piece = min(knot, q - 1)
        tau = c.time - knots[piece]
        brow = basis_row(tau, d, c.order)
        for j, val in enumerate(c.value):
            if math.isnan(val):
                continue
            row = np.zeros(n_unknown)
            s = _unknown_index(piece, j, k, d)
            row[s:s + d + 1] = brow
            rows.append(row)
            rhs.append(val)
            labels.append(f"t={c.time:g} n={c.order} dim={j}")
    for i in range(1, q):
        h = knots[i] - knots[i - 1]
        for n in range(continuity + 1):
            left = basis_row(h, d, n)
            right = basis_row(0.0, d, n)
            for j in range(k):
                row = np.zeros(n_unknown)
                sl = _unknown_index(i - 1, j, k, d)
                sr = _unknown_index(i, j, k, d)
                row[sl:sl + d + 1] = left
                row[sr:sr + d + 1] -= right
                rows.append(row)
                rhs.append(0.0)
                labels.append(f"knot={i} cont={n} dim={j}")
    A = np.array(rows).reshape(len(rows), n_unknown)
    b = np.array(rhs, dtype=float)
    A.setflags(write=False)
    b.setflags(write=False)
    return ConstraintSystem(A, b, k, d, knots, continuity, tuple(labels))


def solve_particular(sys: ConstraintSystem) -> PiecewisePolynomial:
    """Minimum-coefficient-norm polynomial satisfying every constraint."""
    x = np.linalg.pinv(sys.A, rcond=RANK_RTOL) @ sys.b
    res = float(np.linalg.norm(sys.A @ x - sys.b))
    scale = max(1.0, float(np.linalg.norm(sys.b)))
    if res > CONSISTENCY_RTOL * scale:
        raise InfeasibleConstraintsError(f"inconsistent constraints (residual {res:.3e})", res)
    return PiecewisePolynomial.from_vector(sys.knots, x, sys.k, sys.d)


@dataclass(frozen=True)
class NullSpaceParam:
    particular: PiecewisePolynomial
    basis: tuple  # of PiecewisePolynomial
    system: ConstraintSystem

    @property
    def m(self) -> int:
        return len(self.basis)

    def basis_matrix(self) -> np.ndarray:
        """Columns are the stacked coefficient vectors of the basis polynomials."""
        if not self.basis:
            return np.zeros((self.system.unknowns, 0))
        return np.stack([b.to_vector() for b in self.basis], axis=1)


def null_space_basis(sys: ConstraintSystem) -> NullSpaceParam:
    particular = solve_particular(sys)
    _, s, vt = np.linalg.svd(sys.A, full_matrices=True)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    null = vt[rank:]
    basis = tuple(PiecewisePolynomial.from_vector(sys.knots, v, sys.k, sys.d) for v in null)
    return NullSpaceParam(particular, basis, sys)


def compose(param: NullSpaceParam, weights) -> PiecewisePolynomial:
    """``particular + sum_i w_i * basis_i``."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != param.m:
        raise ValueError(f"expected {param.m} weights, got {w.size}")
    x = param.particular.to_vector() + param.basis_matrix() @ w
    return PiecewisePolynomial.from_vector(param.system.knots, x, param.system.k, param.system.d)


class TrajectorySpace:
    """Null-space parameterization assembled on time-scaled knots.

    Constraints and knots are given in real time.  The system is solved on
    knots scaled so the longest piece spans ``max_piece`` seconds, and
    :meth:`trajectory` maps weights back to a real-time polynomial.
    """

    def __init__(self, constraints, continuity, k, d, knots, max_piece=1.0):
        knots = np.asarray(knots, dtype=float)
        self.knots = knots
        self.scale = min(1.0, max_piece / float(np.max(np.diff(knots))))
        s = self.scale
        scaled = [
            TrajectoryConstraint(c.time * s, c.order, tuple(np.asarray(c.value) * s ** -c.order))
            for c in constraints
        ]
        self.constraints = tuple(constraints)
        self.system = build_constraint_system(scaled, continuity, k, d, knots * s)
        self.param = null_space_basis(self.system)

    @property
    def m(self) -> int:
        return self.param.m

    def trajectory(self, weights) -> PiecewisePolynomial:
        return time_scale(compose(self.param, weights), 1.0 / self.scale)

    def particular(self) -> PiecewisePolynomial:
        return time_scale(self.param.particular, 1.0 / self.scale)


# -- serialization -------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("trajectory contains non-finite values")
    return format(x, ".17g")


def _render(obj) -> str:
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_render(v) for v in obj) + "]"
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    return json.dumps(obj)


def to_json(pp: PiecewisePolynomial) -> str:
    doc = {"k": pp.k, "d": pp.d, "q": pp.q, "knots": pp.knots, "coeffs": pp.coeffs}
    body = ",\n  ".join(f'"{key}": {_render(val)}' for key, val in doc.items())
    return "{\n  " + body + "\n}\n"


def from_json(text: str) -> PiecewisePolynomial:
    doc = json.loads(text)
    pp = PiecewisePolynomial(np.array(doc["knots"], float), np.array(doc["coeffs"], float))
    if (pp.k, pp.d, pp.q) != (doc["k"], doc["d"], doc["q"]):
        raise ValueError("trajectory header disagrees with coefficient shape")
    return pp


def save(pp: PiecewisePolynomial, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(pp))


def load(path) -> PiecewisePolynomial:
    with open(path) as fh:
        return from_json(fh.read())
