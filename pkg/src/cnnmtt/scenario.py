"""Multi-sensor multi-target scenario simulation.

Targets follow the nearly-constant-velocity (white noise acceleration) model,
die independently, are born by a Poisson process over the simulation region,
and are observed by static range-bearing sensors with clutter.

Coordinates are meters, centered on the rendering window. The simulation
region is the concentric square of width ``W = w + 2R``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

KM = 1000.0


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the substream ``key`` of ``seed``.

    Streams for distinct keys are statistically independent, so any
    (simulation, step, substream) triple can be generated in isolation.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass(frozen=True)
class TargetState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    id: int


@dataclass(frozen=True)
class Sensor:
    position: tuple[float, float]
    id: int


@dataclass(frozen=True)
class Measurement:
    range: float
    bearing: float
    sensor_id: int
    is_clutter: bool = False


@dataclass(frozen=True, eq=False)
class MultiTargetState:
    """The multi-target state at one time step, stored column-wise.

    ``positions`` and ``velocities`` are ``(n, 2)`` arrays and ``ids`` holds
    the unique integer label of each row.
    """

    positions: np.ndarray
    velocities: np.ndarray
    ids: np.ndarray
    time_step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float).reshape(-1, 2))
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64).reshape(-1))
        n = len(self.ids)
        if self.positions.shape[0] != n or self.velocities.shape[0] != n:
            raise ValueError("positions, velocities and ids must have the same length")
        if len(np.unique(self.ids)) != n:
            raise ValueError("target ids must be unique")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("target states must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def targets(self) -> list[TargetState]:
        return [
            TargetState(tuple(p), tuple(v), int(i))
            for p, v, i in zip(self.positions.tolist(), self.velocities.tolist(), self.ids.tolist())
        ]

    @classmethod
    def from_targets(cls, targets: Sequence[TargetState], time_step: int = 0) -> "MultiTargetState":
        return cls(
            np.array([t.position for t in targets], dtype=float).reshape(-1, 2),
            np.array([t.velocity for t in targets], dtype=float).reshape(-1, 2),
            np.array([t.id for t in targets], dtype=np.int64),
            time_step,
        )

    @classmethod
    def empty(cls, time_step: int = 0) -> "MultiTargetState":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64), time_step)


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """All sensors' measurements at one time step, stored column-wise."""

    ranges: np.ndarray
    bearings: np.ndarray
    sensor_ids: np.ndarray
    is_clutter: np.ndarray
    time_step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ranges", np.asarray(self.ranges, dtype=float).reshape(-1))
        object.__setattr__(self, "bearings", np.asarray(self.bearings, dtype=float).reshape(-1))
        object.__setattr__(self, "sensor_ids", np.asarray(self.sensor_ids, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "is_clutter", np.asarray(self.is_clutter, dtype=bool).reshape(-1))
        n = len(self.ranges)
        if not (len(self.bearings) == len(self.sensor_ids) == len(self.is_clutter) == n):
            raise ValueError("measurement columns must have the same length")
        if np.any(self.ranges < 0):
            raise ValueError("ranges must be non-negative")
        if np.any(self.bearings <= -np.pi) or np.any(self.bearings > np.pi):
            raise ValueError("bearings must lie in (-pi, pi]")

    def __len__(self) -> int:
        return len(self.ranges)

    @property
    def measurements(self) -> list[Measurement]:
        return [
            Measurement(r, b, s, c)
            for r, b, s, c in zip(
                self.ranges.tolist(), self.bearings.tolist(), self.sensor_ids.tolist(), self.is_clutter.tolist()
            )
        ]

    @classmethod
    def from_measurements(cls, ms: Sequence[Measurement], time_step: int = 0) -> "MeasurementSet":
        return cls(
            [m.range for m in ms],
            [m.bearing for m in ms],
            [m.sensor_id for m in ms],
            [m.is_clutter for m in ms],
            time_step,
        )

    @classmethod
    def concat(cls, sets: Sequence["MeasurementSet"], time_step: int = 0) -> "MeasurementSet":
        if not sets:
            return cls([], [], [], [], time_step)
        return cls(
            np.concatenate([s.ranges for s in sets]),
            np.concatenate([s.bearings for s in sets]),
            np.concatenate([s.sensor_ids for s in sets]),
            np.concatenate([s.is_clutter for s in sets]),
            time_step,
        )

    def to_cartesian(self, sensors: Sequence[Sensor]) -> np.ndarray:
        """Positions implied by each measurement, ``(n, 2)`` in meters."""
        origin = sensor_positions(sensors, self.sensor_ids)
        return origin + self.ranges[:, None] * np.stack([np.cos(self.bearings), np.sin(self.bearings)], axis=1)


def sensor_positions(sensors: Sequence[Sensor], ids=None) -> np.ndarray:
    table = {s.id: s.position for s in sensors}
    if ids is None:
        ids = [s.id for s in sensors]
    try:
        return np.array([table[int(i)] for i in ids], dtype=float).reshape(-1, 2)
    except KeyError as exc:
        raise ValueError(f"measurement references unknown sensor {exc.args[0]}") from None


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario parameters. Widths and ranges in km, everything else SI."""

    window_width_w: float = 1.0
    sensor_range_R: float = 2.0
    target_density: float = 10.0
    sensor_density: float = 0.25
    p_death: float = 0.05
    birth_rate_lambda: float | None = None
    time_step_T: float = 1.0
    accel_std_sigma_eta: float = 1.0
    init_speed_std: float = 5.0
    p_detect: float = 0.95
    range_noise_std: float = 10.0
    bearing_noise_std: float = 0.035
    clutter_rate_lambda_C: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.birth_rate_lambda is None:
            object.__setattr__(self, "birth_rate_lambda", 0.5 * self.window_width_w**2)
        checks = {
            "window_width_w": self.window_width_w > 0,
            "sensor_range_R": self.sensor_range_R > 0,
            "target_density": self.target_density >= 0,
            "sensor_density": self.sensor_density >= 0,
            "p_death": 0 <= self.p_death <= 1,
            "birth_rate_lambda": self.birth_rate_lambda >= 0,
            "time_step_T": self.time_step_T > 0,
            "accel_std_sigma_eta": self.accel_std_sigma_eta >= 0,
            "init_speed_std": self.init_speed_std >= 0,
            "p_detect": 0 <= self.p_detect <= 1,
            "range_noise_std": self.range_noise_std >= 0,
            "bearing_noise_std": self.bearing_noise_std >= 0,
            "clutter_rate_lambda_C": self.clutter_rate_lambda_C >= 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid scenario parameters: {', '.join(bad)}")

    @property
    def sim_width_W(self) -> float:
        return self.window_width_w + 2 * self.sensor_range_R

    @property
    def window_m(self) -> float:
        return self.window_width_w * KM

    @property
    def sim_width_m(self) -> float:
        return self.sim_width_W * KM

    @property
    def range_m(self) -> float:
        return self.sensor_range_R * KM

    def replace(self, **changes) -> "ScenarioConfig":
        if "window_width_w" in changes and "birth_rate_lambda" not in changes:
            changes["birth_rate_lambda"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _uniform_square(rng: np.random.Generator, n: int, width: float) -> np.ndarray:
    return rng.uniform(-width / 2, width / 2, size=(n, 2))


def init_scenario(config: ScenarioConfig, rng: np.random.Generator) -> tuple[MultiTargetState, tuple[Sensor, ...]]:
    """Initial targets and static sensors, uniform over the simulation region."""
    area = config.sim_width_W**2
    n_targets = rng.poisson(config.target_density * area)
    n_sensors = rng.poisson(config.sensor_density * area)
    positions = _uniform_square(rng, n_targets, config.sim_width_m)
    velocities = rng.normal(0.0, config.init_speed_std, size=(n_targets, 2))
    sensors = tuple(Sensor(tuple(p), i) for i, p in enumerate(_uniform_square(rng, n_sensors, config.sim_width_m).tolist()))
    return MultiTargetState(positions, velocities, np.arange(n_targets), 0), sensors


def step_dynamics(state: MultiTargetState, config: ScenarioConfig, rng: np.random.Generator | None = None, noise=None) -> MultiTargetState:
    """One CV transition. ``noise`` overrides the acceleration draw, shape ``(n, 2)``.

    The same acceleration sample drives the position and velocity rows.
    """
    T = config.time_step_T
    n = len(state)
    if noise is None:
        eta = rng.normal(0.0, config.accel_std_sigma_eta, size=(n, 2))
    else:
        eta = np.asarray(noise, dtype=float).reshape(n, 2)
    positions = state.positions + T * state.velocities + 0.5 * T**2 * eta
    velocities = state.velocities + T * eta
    return MultiTargetState(positions, velocities, state.ids, state.time_step + 1)


def apply_birth_death(state: MultiTargetState, config: ScenarioConfig, rng: np.random.Generator, next_id: int | None = None) -> MultiTargetState:
    """Independent deaths followed by Poisson births with fresh ids.

    Fresh ids continue from ``next_id``; by default one past the largest id
    currently alive. Simulations track ``next_id`` so ids are never reused.
    """
    survive = rng.random(len(state)) >= config.p_death
    n_birth = rng.poisson(config.birth_rate_lambda)
    if next_id is None:
        next_id = int(state.ids.max()) + 1 if len(state) else 0
    positions = np.concatenate([state.positions[survive], _uniform_square(rng, n_birth, config.sim_width_m)])
    velocities = np.concatenate([state.velocities[survive], rng.normal(0.0, config.init_speed_std, size=(n_birth, 2))])
    ids = np.concatenate([state.ids[survive], np.arange(next_id, next_id + n_birth)])
    return MultiTargetState(positions, velocities, ids, state.time_step)


def sense(state: MultiTargetState, sensors: Sequence[Sensor], config: ScenarioConfig, rng: np.random.Generator) -> MeasurementSet:
    """Range-bearing detections plus uniform-disk clutter for every sensor."""
    R = config.range_m
    out = []
    for sensor in sensors:
        d = state.positions - np.asarray(sensor.position)
        true_range = np.hypot(d[:, 0], d[:, 1])
        # atan2(0, 0) == 0 gives the coincident-target convention for free
        true_bearing = np.arctan2(d[:, 1], d[:, 0])
        in_range = true_range <= R
        detected = in_range & (rng.random(len(state)) < config.p_detect)
        k = int(detected.sum())
        ranges = true_range[detected] + rng.normal(0.0, config.range_noise_std, size=k)
        bearings = true_bearing[detected] + rng.normal(0.0, config.bearing_noise_std, size=k)

        n_clutter = rng.poisson(config.clutter_rate_lambda_C * config.time_step_T)
        rho = R * np.sqrt(rng.random(n_clutter))
        theta = rng.uniform(-np.pi, np.pi, size=n_clutter)
        cx, cy = rho * np.cos(theta), rho * np.sin(theta)
        out.append(
            MeasurementSet(
                np.maximum(np.concatenate([ranges, np.hypot(cx, cy)]), 0.0),
                wrap_angle(np.concatenate([bearings, np.arctan2(cy, cx)])),
                np.full(k + n_clutter, sensor.id),
                np.concatenate([np.zeros(k, bool), np.ones(n_clutter, bool)]),
                state.time_step,
            )
        )
    return MeasurementSet.concat(out, state.time_step)


@dataclass
class SimulationRun:
    """Output of :func:`run_simulation`: static sensors plus one frame per step."""

    config: ScenarioConfig
    sensors: tuple[Sensor, ...]
    initial: MultiTargetState
    frames: list[tuple[MultiTargetState, MeasurementSet]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[tuple[MultiTargetState, MeasurementSet]]:
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


# substream indices within a step
_DYNAMICS, _BIRTH_DEATH, _SENSE = 0, 1, 2


def run_simulation(config: ScenarioConfig, num_steps: int, sim_index: int = 0) -> SimulationRun:
    """Simulate ``num_steps`` transitions; deterministic in (config.seed, sim_index)."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    state, sensors = init_scenario(config, stream(config.seed, sim_index, 0, 0))
    run = SimulationRun(config, sensors, state)
    next_id = len(state)
    for n in range(1, num_steps + 1):
        state = step_dynamics(state, config, stream(config.seed, sim_index, n, _DYNAMICS))
        state = apply_birth_death(state, config, stream(config.seed, sim_index, n, _BIRTH_DEATH), next_id=next_id)
        if len(state):
            next_id = max(next_id, int(state.ids.max()) + 1)
        run.frames.append((state, sense(state, sensors, config, stream(config.seed, sim_index, n, _SENSE))))
    return run


def in_window(positions: np.ndarray, width_m: float) -> np.ndarray:
    """Mask of positions strictly inside the centered square of width ``width_m``."""
    half = width_m / 2
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    return (np.abs(positions[:, 0]) < half) & (np.abs(positions[:, 1]) < half)


def stationary_count(config: ScenarioConfig, step: int) -> float:
    """Expected total target count after ``step`` transitions.

    Initial Poisson population decays geometrically; births balance deaths
    at ``lambda_birth / p_death``.
    """
    q = 1.0 - config.p_death
    n0 = config.target_density * config.sim_width_W**2
    if config.p_death == 0:
        return n0 + config.birth_rate_lambda * step
    eq = config.birth_rate_lambda / config.p_death
    return eq + (n0 - eq) * q**step


def expected_in_window(config: ScenarioConfig, step: int) -> float:
    """Approximate expected count inside the rendering window (uniform density)."""
    return stationary_count(config, step) * (config.window_width_w / config.sim_width_W) ** 2


__all__ = [
    "KM",
    "Measurement",
    "MeasurementSet",
    "MultiTargetState",
    "ScenarioConfig",
    "Sensor",
    "SimulationRun",
    "TargetState",
    "apply_birth_death",
    "expected_in_window",
    "in_window",
    "init_scenario",
    "run_simulation",
    "sense",
    "sensor_positions",
    "stationary_count",
    "step_dynamics",
    "stream",
    "wrap_angle",
]
