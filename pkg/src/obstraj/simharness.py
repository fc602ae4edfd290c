"""Ground-truth simulation, Monte Carlo evaluation and baseline trajectories.

A run samples the flat trajectory at the IMU rate, inverts the IMU model to
synthesize noisy accelerometer and gyro readings, adds GPS fixes at the GPS
rate and feeds everything through the EKF.  The filter starts believing
that every calibration state is zero.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gpsimu, polytraj, quadflat
from .gpsimu import BLOCKS, Calibration, Ekf, GpsSample, ImuSample, NoiseParams
from .obsgram import NumericalFailure
from .quadflat import PhysicalLimits

DIVERGENCE_LIMIT = 100.0
MAX_REJECTION_DRAWS = 10_000
PL_BAND = 0.15
BLOCK_NAMES = tuple(BLOCKS)


class AllRunsDivergedError(RuntimeError):
    pass


class RejectionSamplingError(RuntimeError):
    def __init__(self, message, stats):
        super().__init__(message)
        self.stats = stats


class TrajectoryFitError(RuntimeError):
    def __init__(self, message, worst_margin):
        super().__init__(message)
        self.worst_margin = worst_margin


@dataclass(frozen=True)
class ScenarioConfig:
    duration: float = 30.0
    b_a: tuple = (0.05, 0.05, 0.05)
    b_w: tuple = (0.01, 0.01, 0.01)
    p_ip: tuple = (0.1, 0.1, 0.1)
    noise: NoiseParams = NoiseParams()
    imu_rate: float = 100.0
    gps_rate: float = 5.0
    runs: int = 50
    seed: int = 0
    noise_scale: float = 1.0  # scales the synthesized noise only; the filter keeps ``noise``
    perfect_init: bool = False
    bias_walk: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.runs < 1:
            raise ValueError("at least one Monte Carlo run is required")
        if self.imu_rate <= 0 or self.gps_rate <= 0 or self.gps_rate > self.imu_rate:
            raise ValueError("rates must be positive with gps_rate <= imu_rate")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    @property
    def calibration(self) -> Calibration:
        return Calibration(b_w=tuple(self.b_w), b_a=tuple(self.b_a), p_ip=tuple(self.p_ip))

    @property
    def gps_every(self) -> int:
        return max(1, int(round(self.imu_rate / self.gps_rate)))


@dataclass
class RunResult:
    times: np.ndarray
    errors: np.ndarray  # (steps + 1, 18) error-state truth minus estimate
    seed: int
    diverged: bool = False
    diagnostic: str = ""

    def block_norms(self, block: str) -> np.ndarray:
        return np.linalg.norm(self.errors[:, BLOCKS[block]], axis=1)

    @property
    def integrated(self) -> dict:
        dt = np.diff(self.times)
        return {b: float(np.sum(self.block_norms(b)[1:] * dt)) for b in BLOCK_NAMES}

    @property
    def final(self) -> dict:
        return {b: float(self.block_norms(b)[-1]) for b in BLOCK_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"{b}_err" for b in BLOCK_NAMES])
        norms = np.stack([self.block_norms(b) for b in BLOCK_NAMES], 1)
        for t, row in zip(self.times, norms):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        return buf.getvalue()


@dataclass
class AggregateStats:
    times: np.ndarray
    rmse: dict  # block -> ensemble RMSE series
    integrated_rmse: dict
    final_rmse: dict
    integrated_mean: dict
    integrated_std: dict
    final_mean: dict
    final_std: dict
    runs: int
    excluded: int
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "excluded": self.excluded,
            "integrated_rmse": self.integrated_rmse,
            "final_rmse": self.final_rmse,
            "integrated_mean": self.integrated_mean,
            "integrated_std": self.integrated_std,
            "final_mean": self.final_mean,
            "final_std": self.final_std,
            "diagnostics": list(self.diagnostics),
        }

    def rmse_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"{b}_rmse" for b in BLOCK_NAMES])
        for k, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(self.rmse[b][k])) for b in BLOCK_NAMES])
        return buf.getvalue()


# -- simulation ---------------------------------------------------------------

def _grid(pp, scenario):
    dt = 1.0 / scenario.imu_rate
    n = int(round(pp.duration * scenario.imu_rate))
    t = pp.t0 + dt * np.arange(n + 1)
    t[-1] = min(t[-1], pp.tf)
    return t


def synthesize(pp, scenario: ScenarioConfig, rng: np.random.Generator):
    """Truth states, noisy IMU inputs and GPS fixes on the IMU grid."""
    t = _grid(pp, scenario)
    N = len(t)
    noise = scenario.noise
    c = scenario.noise_scale
    X, U_clean, _ = gpsimu.truth_samples(pp, t, Calibration())
    dt = np.diff(t, prepend=t[0])

    def walk(x0, sigma):
        steps = rng.standard_normal((N, 3)) * (c * sigma * np.sqrt(dt))[:, None]
        steps[0] = 0.0
        drift = np.cumsum(steps, 0) if scenario.bias_walk else np.zeros((N, 3))
        return np.asarray(x0, float) + drift

    ba = walk(scenario.b_a, noise.sigma_accel_bias)
    bw = walk(scenario.b_w, noise.sigma_gyro_bias)
    pip = np.broadcast_to(np.asarray(scenario.p_ip, float), (N, 3))
    p, v, q, _, _, _ = gpsimu.split(X)
    X = gpsimu.join(p, v, q, bw, ba, pip)

    h = 1.0 / scenario.imu_rate
    acc_noise = rng.standard_normal((N, 3)) * c * noise.sigma_accel / np.sqrt(h)
    gyro_noise = rng.standard_normal((N, 3)) * c * noise.sigma_gyro / np.sqrt(h)
    U = np.concatenate([U_clean[:, :3] + ba + acc_noise, U_clean[:, 3:] + bw + gyro_noise], 1)

    every = scenario.gps_every
    gps_idx = np.arange(every, N, every)
    Z = gpsimu.measure(X[gps_idx]) + rng.standard_normal((len(gps_idx), 3)) * c * noise.sigma_gps
    return t, X, U, gps_idx, Z


def initial_estimate(x_true0, scenario: ScenarioConfig, rng: np.random.Generator):
    """Filter start: p, v, attitude drawn from the prior; calibration believed zero."""
    if scenario.perfect_init:
        return x_true0.copy()
    sd = np.sqrt(np.diag(gpsimu.initial_covariance()))
    delta = np.zeros(18)
    delta[:9] = rng.standard_normal(9) * sd[:9]
    x = gpsimu.retract(x_true0, delta)
    p, v, q, _, _, _ = gpsimu.split(x)
    z = np.zeros(3)
    return gpsimu.join(p, v, q, z, z, z)


def simulate_run(pp, scenario: ScenarioConfig, seed: int) -> RunResult:
    rng = np.random.default_rng(seed)
    t, X, U, gps_idx, Z = synthesize(pp, scenario, rng)
    ekf = Ekf(initial_estimate(X[0], scenario, rng), noise=scenario.noise, t0=float(t[0]))
    errors = np.full((len(t), 18), np.nan)
    errors[0] = gpsimu.difference(X[0], ekf.x)
    gps_at = dict(zip(gps_idx.tolist(), range(len(gps_idx))))
    ekf.push_imu(ImuSample(U[0, :3], U[0, 3:], float(t[0])))
    try:
        for k in range(1, len(t)):
            ekf.propagate(ImuSample(U[k, :3], U[k, 3:], float(t[k])), float(t[k] - t[k - 1]))
            j = gps_at.get(k)
            if j is not None:
                ekf.update_gps(GpsSample(Z[j], float(t[k])))
            e = gpsimu.difference(X[k], ekf.x)
            errors[k] = e
            if np.linalg.norm(e[0:3]) > DIVERGENCE_LIMIT:
                return RunResult(t, errors, seed, True, f"position error above {DIVERGENCE_LIMIT} m at t={t[k]:.2f}")
    except NumericalFailure as exc:
        return RunResult(t, errors, seed, True, f"numerical failure: {exc}")
    return RunResult(t, errors, seed)


def _run_job(args):
    pp_json, scenario, seed = args
    return simulate_run(polytraj.from_json(pp_json), scenario, seed)


def run_ensemble(pp, scenario: ScenarioConfig, jobs: int = 1) -> list:
    seeds = [scenario.seed + i for i in range(scenario.runs)]
    if jobs <= 1:
        return [simulate_run(pp, scenario, s) for s in seeds]
    payload = polytraj.to_json(pp)
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_job, [(payload, scenario, s) for s in seeds]))


def aggregate(results: list) -> AggregateStats:
    """Ensemble statistics over non-diverged runs, independent of run order."""
    kept = sorted((r for r in results if not r.diverged), key=lambda r: r.seed)
    diags = [f"seed {r.seed}: {r.diagnostic}" for r in results if r.diverged]
    if not kept:
        raise AllRunsDivergedError("all Monte Carlo runs diverged; " + "; ".join(diags))
    t = kept[0].times
    dt = np.diff(t)
    rmse, integ, final = {}, {}, {}
    im, isd, fm, fsd = {}, {}, {}, {}
    for b in BLOCK_NAMES:
        sq = np.sort(np.stack([r.block_norms(b) ** 2 for r in kept]), axis=0)
        series = np.sqrt(np.mean(sq, axis=0))
        rmse[b] = series
        integ[b] = float(np.sum(series[1:] * dt))
        final[b] = float(series[-1])
        ints = np.sort([r.integrated[b] for r in kept])
        fins = np.sort([r.final[b] for r in kept])
        im[b], isd[b] = float(np.mean(ints)), float(np.std(ints))
        fm[b], fsd[b] = float(np.mean(fins)), float(np.std(fins))
    return AggregateStats(t, rmse, integ, final, im, isd, fm, fsd, len(kept), len(results) - len(kept), diags)


def monte_carlo(pp, scenario: ScenarioConfig, jobs: int = 1) -> AggregateStats:
    return aggregate(run_ensemble(pp, scenario, jobs))


# -- trajectory spaces --------------------------------------------------------

def rest_constraints(t, pose, orders=3):
    """Position/yaw ``pose`` at ``t`` with zero derivatives up to ``orders - 1``."""
    out = [polytraj.TrajectoryConstraint(t, 0, tuple(float(v) for v in pose))]
    out += [polytraj.TrajectoryConstraint(t, n, (0.0, 0.0, 0.0, 0.0)) for n in range(1, orders)]
    return out


def endpoint_space(duration=30.0, pieces=6, start=(0.0, 0.0, 1.0, 0.0), end=None,
                   d=6, continuity=4) -> polytraj.TrajectorySpace:
    """Rest-to-rest trajectory space with uniform knots."""
    end = start if end is None else end
    knots = np.linspace(0.0, duration, pieces + 1)
    cons = rest_constraints(0.0, start) + rest_constraints(duration, end)
    return polytraj.TrajectorySpace(cons, continuity, 4, d, knots)


def waypoint_space(waypoints, duration=50.0, pieces_per_leg=2, d=6, continuity=4,
                   start_yaw=0.0) -> polytraj.TrajectorySpace:
    """Rest-to-rest through ``waypoints`` (x, y, z) at evenly spaced times; yaw free in between."""
    wps = np.asarray(waypoints, float)
    legs = len(wps) - 1
    if legs < 1:
        raise ValueError("need at least two waypoints")
    knots = np.linspace(0.0, duration, legs * pieces_per_leg + 1)
    t_wp = np.linspace(0.0, duration, legs + 1)
    cons = rest_constraints(0.0, (*wps[0], start_yaw)) + rest_constraints(duration, (*wps[-1], start_yaw))
    nan = float("nan")
    for tw, wp in zip(t_wp[1:-1], wps[1:-1]):
        cons.append(polytraj.TrajectoryConstraint(float(tw), 0, (*map(float, wp), nan)))
    return polytraj.TrajectorySpace(cons, continuity, 4, d, knots)


# -- baselines ----------------------------------------------------------------

def _smoothstep(s):
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def fit_path(path, duration, pieces, d=6, continuity=4, smooth_dims=(0, 1, 2, 3)):
    """Interpolate ``path(t) -> (N, 4)`` at the knots, rest at both ends, minimum snap elsewhere."""
    knots = np.linspace(0.0, duration, pieces + 1)
    pts = path(knots)
    cons = rest_constraints(0.0, pts[0]) + rest_constraints(duration, pts[-1])
    for tk, pk in zip(knots[1:-1], pts[1:-1]):
        cons.append(polytraj.TrajectoryConstraint(float(tk), 0, tuple(map(float, pk))))
    space = polytraj.TrajectorySpace(cons, continuity, 4, d, knots)
    from .optimizer import min_snap_weights
    return space.trajectory(min_snap_weights(space, smooth_dims))


def check_feasible(pp, limits: PhysicalLimits = PhysicalLimits(), sample_dt=0.02):
    worst = float(quadflat.constraint_margins(pp, limits, sample_dt).min())
    if worst < -1e-6:
        raise TrajectoryFitError(f"trajectory violates physical limits (worst margin {worst:.4g})", worst)
    return worst


def gen_figure8(size=(2.0, 1.0), duration=30.0, yaw_amplitude=np.pi / 2, loops=2,
                altitude=1.0, pieces_per_loop=12, limits: PhysicalLimits | None = PhysicalLimits()):
    """Lemniscate of Gerono, ``size`` = (length, width); the path is a time-warped closed curve."""
    if min(size) <= 0 or duration <= 0 or loops < 1:
        raise ValueError("figure-8 geometry must be positive")
    a, b = size[0] / 2, size[1] / 2

    def path(t):
        phi = 2 * np.pi * loops * _smoothstep(t / duration)
        return np.stack([a * np.sin(phi), b * np.sin(2 * phi), np.full_like(t, altitude),
                         yaw_amplitude * np.sin(phi)], 1)

    pp = fit_path(path, duration, loops * pieces_per_loop)
    if limits is not None:
        check_feasible(pp, limits)
    return pp


def star_vertices(points=5, radius=1.5):
    ang = np.pi / 2 + 2 * np.pi * np.arange(points) / points
    return radius * np.stack([np.cos(ang), np.sin(ang)], 1)


def gen_star(points=5, radius=1.5, duration=30.0, yaw_amplitude=np.pi / 2, loops=1,
             altitude=1.0, pieces_per_edge=2, limits: PhysicalLimits | None = PhysicalLimits()):
    """Star polygon through the outer vertices (every second vertex), corners smoothed by the fit.

    Vertex ``j`` of the tour is reached at ``t = j * duration / (points * loops)``.
    """
    if points < 5 or points % 2 == 0 or radius <= 0 or duration <= 0:
        raise ValueError("star needs an odd point count >= 5 and positive size")
    verts = star_vertices(points, radius)
    order = (2 * np.arange(points * loops + 1)) % points
    tour = verts[order]
    edges = points * loops

    def path(t):
        s = np.clip(t / duration * edges, 0, edges)
        i = np.minimum(np.floor(s).astype(int), edges - 1)
        f = (s - i)[:, None]
        xy = tour[i] * (1 - f) + tour[i + 1] * f
        yaw = yaw_amplitude * np.sin(2 * np.pi * loops * t / duration)
        return np.column_stack([xy, np.full_like(t, altitude), yaw])

    pp = fit_path(path, duration, edges * pieces_per_edge)
    if limits is not None:
        check_feasible(pp, limits)
    return pp


def min_normalized_margin(pp, limits: PhysicalLimits = PhysicalLimits(), sample_dt=0.02) -> float:
    try:
        mg = quadflat.constraint_margins(pp, limits, sample_dt)
    except quadflat.FlatnessSingularityError:
        return -math.inf
    return float((mg / limits.as_array()).min())


def random_weights(space: polytraj.TrajectorySpace, scale: float, seed: int,
                   limits: PhysicalLimits = PhysicalLimits(), mode: str = "plain",
                   sample_dt: float = 0.02) -> np.ndarray:
    if space.m <= 0:
        raise ValueError("trajectory space has no free weights")
    if mode not in ("plain", "physical_limit"):
        raise ValueError(f"unknown random mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "plain":
        return rng.standard_normal(space.m) * scale
    feasible = 0
    best = -math.inf
    for _ in range(MAX_REJECTION_DRAWS):
        w = rng.standard_normal(space.m) * scale
        mm = min_normalized_margin(space.trajectory(w), limits, sample_dt)
        if mm >= 0:
            feasible += 1
            if mm <= PL_BAND:
                return w
        best = max(best, mm)
    stats = {"draws": MAX_REJECTION_DRAWS, "feasible": feasible, "best_feasible_or_max_margin": best}
    raise RejectionSamplingError(f"no near-limit sample after {MAX_REJECTION_DRAWS} draws: {stats}", stats)


def gen_random(space: polytraj.TrajectorySpace, scale: float, seed: int,
               limits: PhysicalLimits = PhysicalLimits(), mode: str = "plain"):
    return space.trajectory(random_weights(space, scale, seed, limits, mode))


def hover(duration=30.0, pose=(0.0, 0.0, 1.0, 0.0)):
    coeffs = np.zeros((1, 4, 7))
    coeffs[0, :, 0] = pose
    return polytraj.PiecewisePolynomial(np.array([0.0, duration]), coeffs)


def stats_json(stats: AggregateStats, extra: dict | None = None) -> str:
    doc = stats.to_dict()
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def scenario_dict(s: ScenarioConfig) -> dict:
    d = asdict(s)
    d["b_a"], d["b_w"], d["p_ip"] = list(s.b_a), list(s.b_w), list(s.p_ip)
    return d
