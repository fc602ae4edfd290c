"""Experiment configuration: YAML in, frozen dataclasses out.

Every section is optional and falls back to the library defaults.  Unknown
keys are rejected with the dotted path of the offending key, so typos never
silently turn into defaults.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import gpsimu, obsgram, polytraj, simharness
from .quadflat import PhysicalLimits


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class NoiseSection:
    sigma_gps: float = 0.2
    sigma_accel: float = 0.02
    sigma_gyro: float = 0.002
    sigma_accel_bias: float = 1e-4
    sigma_gyro_bias: float = 1e-5


@dataclass(frozen=True)
class ScenarioSection:
    duration: float = 30.0
    b_a: tuple = (0.05, 0.05, 0.05)
    b_w: tuple = (0.01, 0.01, 0.01)
    p_ip: tuple = (0.1, 0.1, 0.1)
    imu_rate: float = 100.0
    gps_rate: float = 5.0
    runs: int = 50
    noise_scale: float = 1.0
    perfect_init: bool = False
    bias_walk: bool = True


@dataclass(frozen=True)
class TrajectorySection:
    kind: str = "endpoint"  # endpoint | waypoints
    duration: float = 30.0
    pieces: int = 6
    start: tuple = (0.0, 0.0, 1.0, 0.0)
    end: tuple | None = None
    waypoints: tuple = ()
    pieces_per_leg: int = 2
    degree: int = 6
    continuity: int = 4


@dataclass(frozen=True)
class SeedSection:
    kind: str = "pl_random"  # particular | random | pl_random | min_snap | weights
    scale: float = 20.0
    seed: int | None = None
    weights: tuple = ()


@dataclass(frozen=True)
class ObjectiveSection:
    kind: str = "observability"
    selection: tuple = ("position", "lever_arm")
    taylor_order: int = 2
    horizon: float = 1.0
    step: float = 0.05
    quadrature: str = "simpson"


@dataclass(frozen=True)
class OptimizerSection:
    max_iter: int = 200
    step_tol: float = 1e-6
    ftol: float = 1e-8
    sample_dt: float = 0.02


@dataclass(frozen=True)
class LimitsSection:
    twr_max: float = 1.5
    omega_max: float = math.pi
    omega_dot_max: float = 5 * math.pi


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output: str = "out"
    jobs: int = 1
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    seed_trajectory: SeedSection = field(default_factory=SeedSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    limits: LimitsSection = field(default_factory=LimitsSection)

    # -- derived library objects --------------------------------------------
    def noise_params(self) -> gpsimu.NoiseParams:
        return gpsimu.NoiseParams(**dataclasses.asdict(self.noise))

    def physical_limits(self) -> PhysicalLimits:
        return PhysicalLimits(**dataclasses.asdict(self.limits))

    def scenario_config(self, runs: int | None = None) -> simharness.ScenarioConfig:
        s = self.scenario
        return simharness.ScenarioConfig(
            duration=s.duration, b_a=s.b_a, b_w=s.b_w, p_ip=s.p_ip, noise=self.noise_params(),
            imu_rate=s.imu_rate, gps_rate=s.gps_rate, runs=s.runs if runs is None else runs,
            seed=self.seed, noise_scale=s.noise_scale, perfect_init=s.perfect_init, bias_walk=s.bias_walk)

    def gramian_config(self) -> obsgram.GramianConfig:
        o = self.objective
        return obsgram.GramianConfig(taylor_order=o.taylor_order, horizon=o.horizon, step=o.step,
                                     quadrature=o.quadrature)

    def selection_indices(self) -> list[int]:
        return gpsimu.block_indices(self.objective.selection)

    def trajectory_space(self) -> polytraj.TrajectorySpace:
        t = self.trajectory
        if t.kind == "endpoint":
            return simharness.endpoint_space(t.duration, t.pieces, t.start, t.end, t.degree, t.continuity)
        return simharness.waypoint_space(t.waypoints, t.duration, t.pieces_per_leg, t.degree, t.continuity,
                                         start_yaw=t.start[3] if len(t.start) == 4 else 0.0)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_CHOICES = {
    "trajectory.kind": ("endpoint", "waypoints"),
    "seed_trajectory.kind": ("particular", "random", "pl_random", "min_snap", "weights"),
    "objective.kind": ("observability", "covariance_trace", "min_snap"),
    "objective.quadrature": ("simpson", "trapezoid"),
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(path, value, default, annotation):
    """Light type checking against the field's default/annotation."""
    if value is None:
        if default is None or "None" in str(annotation):
            return None
        raise ConfigError(f"{path}: null is not allowed", path)
    ann = str(annotation)
    if isinstance(default, bool) or ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean", path)
        return value
    if isinstance(default, int) and not isinstance(default, bool) or ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer", path)
        return value
    if isinstance(default, float) or ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number", path)
        return float(value)
    if isinstance(default, str) or ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string", path)
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"{path}: must be one of {', '.join(_CHOICES[path])}", path)
        return value
    if isinstance(default, tuple) or "tuple" in ann:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list", path)
        return _tuplify(list(value))
    return value


def _build(cls, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping", prefix or None)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            path = f"{prefix}{key}"
            raise ConfigError(f"unknown config key '{path}'", path)
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        path = f"{prefix}{name}"
        if dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            kwargs[name] = _build(type(f.default_factory()), data[name], path + ".")
        else:
            default = f.default if f.default is not dataclasses.MISSING else None
            kwargs[name] = _coerce(path, data[name], default, f.type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}", prefix.rstrip(".") or None) from exc


def _validate(cfg: ExperimentConfig):
    t, s = cfg.trajectory, cfg.scenario
    checks = [
        ("trajectory.duration", t.duration > 0, "must be positive"),
        ("trajectory.pieces", t.pieces >= 1, "must be at least 1"),
        ("trajectory.start", len(t.start) == 4, "needs [x, y, z, yaw]"),
        ("trajectory.end", t.end is None or len(t.end) == 4, "needs [x, y, z, yaw]"),
        ("trajectory.waypoints", t.kind != "waypoints" or (len(t.waypoints) >= 2 and all(len(w) == 3 for w in t.waypoints)),
         "needs at least two [x, y, z] points"),
        ("trajectory.degree", t.degree >= 1, "must be at least 1"),
        ("trajectory.continuity", 0 <= t.continuity <= t.degree, "must lie in [0, degree]"),
        ("scenario.duration", s.duration > 0, "must be positive"),
        ("scenario.runs", s.runs >= 1, "must be at least 1"),
        ("scenario.b_a", len(s.b_a) == 3, "needs 3 entries"),
        ("scenario.b_w", len(s.b_w) == 3, "needs 3 entries"),
        ("scenario.p_ip", len(s.p_ip) == 3, "needs 3 entries"),
        ("jobs", cfg.jobs >= 1, "must be at least 1"),
        ("seed", cfg.seed >= 0, "must be nonnegative"),
        ("optimizer.max_iter", cfg.optimizer.max_iter >= 1, "must be at least 1"),
        ("objective.taylor_order", cfg.objective.taylor_order >= 0, "must be nonnegative"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}", key)
    for name in cfg.objective.selection:
        if name not in gpsimu.BLOCKS:
            raise ConfigError(f"objective.selection: unknown block '{name}'", "objective.selection")
    if cfg.objective.kind != "min_snap" and not cfg.objective.selection:
        raise ConfigError("objective.selection: required for this objective", "objective.selection")
    sd = cfg.seed_trajectory
    if sd.kind == "weights" and not sd.weights:
        raise ConfigError("seed_trajectory.weights: required when kind is 'weights'", "seed_trajectory.weights")
    return cfg


def from_dict(data) -> ExperimentConfig:
    return _validate(_build(ExperimentConfig, data))


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}", None)
    return loads(p.read_text())


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply CLI overrides (``seed``, ``output``, ``jobs``, ``runs``) where not None."""
    top = {k: v for k, v in kw.items() if k in ("seed", "output", "jobs") and v is not None}
    if kw.get("runs") is not None:
        top["scenario"] = dataclasses.replace(cfg.scenario, runs=int(kw["runs"]))
    return _validate(dataclasses.replace(cfg, **top))


def seed_weights(cfg: ExperimentConfig, space: polytraj.TrajectorySpace) -> np.ndarray:
    sd = cfg.seed_trajectory
    seed = cfg.seed if sd.seed is None else sd.seed
    if sd.kind == "particular":
        return np.zeros(space.m)
    if sd.kind == "weights":
        w = np.asarray(sd.weights, float)
        if w.shape != (space.m,):
            raise ConfigError(f"seed_trajectory.weights: expected {space.m} values", "seed_trajectory.weights")
        return w
    if sd.kind == "min_snap":
        from .optimizer import min_snap_weights
        return min_snap_weights(space)
    mode = "plain" if sd.kind == "random" else "physical_limit"
    return simharness.random_weights(space, sd.scale, seed, cfg.physical_limits(), mode, cfg.optimizer.sample_dt)
