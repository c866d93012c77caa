"""Kinematic bicycle simulator, scenario schedules, reference paths and datasets."""

import bisect
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from scipy.optimize import minimize_scalar
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

N_X = 4
N_U = 2
N_E = 2

MU_MIN, MU_MAX = 0.3, 0.9
WIND_MAX = 8.0

# Schedule boundaries are compared against k * dt, which is not exact in binary.
_TIME_EPS = 1e-9


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleState:
    px: float
    py: float
    psi: float
    v: float

    def as_array(self):
        return np.array([self.px, self.py, self.psi, self.v], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        px, py, psi, v = (float(value) for value in values)
        return cls(px, py, psi, v)


@dataclass(frozen=True)
class ControlInput:
    delta: float
    a: float

    def as_array(self):
        return np.array([self.delta, self.a], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        delta, a = (float(value) for value in values)
        return cls(delta, a)


@dataclass(frozen=True)
class EnvInput:
    mu: float
    w: float

    def as_array(self):
        return np.array([self.mu, self.w], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        mu, w = (float(value) for value in values)
        return cls(mu, w)

    def validate(self):
        _require_finite(self.as_array(), 'окружение')
        if not (MU_MIN <= self.mu <= MU_MAX) or abs(self.w) > WIND_MAX:
            raise ValidationError(
                f"Окружение вне допустимой области: mu={self.mu}, w={self.w}",
                code='out_of_range',
            )


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.7
    mu_ref: float = 0.9
    wind_coupling: float = 0.05
    delta_max: float = 0.5
    a_max: float = 3.0
    v_max: float = 20.0
    gravity: float = 9.81

    @property
    def control_limits(self):
        return np.array([self.delta_max, self.a_max], dtype=np.float64)


DEFAULT_VEHICLE = VehicleParams()


def _require_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"Нечисловое значение: {what}", code='non_finite')


def wrap_angle(angle):
    """Wraps an angle (scalar or array) into (-pi, pi]."""
    return angle - 2.0 * np.pi * np.ceil((angle - np.pi) / (2.0 * np.pi))


def env_grid(n=9):
    """Regular n x n grid over the (mu, w) box, shape (n*n, 2)."""
    mus = np.linspace(MU_MIN, MU_MAX, n)
    winds = np.linspace(-WIND_MAX, WIND_MAX, n)
    mu_mesh, w_mesh = np.meshgrid(mus, winds, indexing='ij')
    return np.stack([mu_mesh.ravel(), w_mesh.ravel()], axis=-1)


# ---------------------------------------------------------------------------
# Bicycle model
# ---------------------------------------------------------------------------

def bicycle_update(x, u, e, dt, params=DEFAULT_VEHICLE):
    """Explicit-Euler bicycle step on arrays with shared leading dimensions."""
    px, py, psi, v = np.moveaxis(np.asarray(x, dtype=np.float64), -1, 0)
    delta, a = np.moveaxis(np.asarray(u, dtype=np.float64), -1, 0)
    mu, w = np.moveaxis(np.asarray(e, dtype=np.float64), -1, 0)

    grip = np.minimum(1.0, mu / params.mu_ref)
    delta_eff = delta * grip
    traction = mu * params.gravity
    a_eff = np.clip(a, -traction, traction)

    px_next = px + dt * v * np.cos(psi)
    py_next = py + dt * (v * np.sin(psi) + params.wind_coupling * w)
    psi_next = wrap_angle(psi + dt * v / params.wheelbase * np.tan(delta_eff))
    v_next = np.clip(v + dt * a_eff, 0.0, params.v_max)
    return np.stack([px_next, py_next, psi_next, v_next], axis=-1)


def step_bicycle(x, u, e, dt, params=DEFAULT_VEHICLE):
    x_arr, u_arr, e_arr = x.as_array(), u.as_array(), e.as_array()
    _require_finite(np.concatenate([x_arr, u_arr, e_arr, [dt]]), 'шаг симулятора')
    if dt <= 0:
        raise ValidationError("Шаг интегрирования должен быть положительным", code='out_of_range')
    if np.any(np.abs(u_arr) > params.control_limits + 1e-12):
        raise ValidationError(
            f"Управление вне ограничений: delta={u.delta}, a={u.a}",
            code='out_of_range',
        )
    e.validate()
    return VehicleState.from_array(bicycle_update(x_arr, u_arr, e_arr, dt, params))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

ENV_A = EnvInput(0.9, 0.0)
ENV_B = EnvInput(0.5, 4.0)
ENV_C = EnvInput(0.3, 8.0)


@dataclass(frozen=True)
class Scenario:
    id: str
    schedule: tuple  # ((start_time, EnvInput), ...) sorted, first start at 0
    duration: float
    period: float | None = None


SCENARIOS = {
    'S1': Scenario('S1', ((0.0, ENV_A),), 60.0),
    'S2': Scenario('S2', ((0.0, EnvInput(0.6, 0.0)), (5.0, EnvInput(0.3, 0.0))), 60.0),
    # A, B, C, B repeating: the first 15 s read A, B, C, B, A.
    'S3': Scenario('S3', ((0.0, ENV_A), (3.0, ENV_B), (6.0, ENV_C), (9.0, ENV_B)), 60.0, period=12.0),
}


def get_scenario(scenario_id, duration=None):
    try:
        scenario = SCENARIOS[scenario_id]
    except KeyError:
        raise ValidationError(f"Неизвестный сценарий: {scenario_id}", code='invalid_choice')
    if duration is not None:
        scenario = Scenario(scenario.id, scenario.schedule, float(duration), scenario.period)
    return scenario


def scenario_env(s, t):
    _require_finite([t], 'время')
    if t < -_TIME_EPS or t > s.duration + _TIME_EPS:
        raise ValidationError(
            f"Время {t} вне сценария {s.id} [0, {s.duration}]",
            code='out_of_range',
        )
    # Snap before wrapping so t just below a period boundary starts the next cycle.
    local = math.fmod(t + _TIME_EPS, s.period) - _TIME_EPS if s.period else t
    starts = [start for start, _ in s.schedule]
    index = bisect.bisect_right(starts, local + _TIME_EPS) - 1
    return s.schedule[max(index, 0)][1]


def switch_times(s, dt=0.1):
    """Times on the dt grid at which the scenario environment changes."""
    steps = int(round(s.duration / dt))
    times = []
    previous = scenario_env(s, 0.0)
    for k in range(1, steps):
        current = scenario_env(s, k * dt)
        if current != previous:
            times.append(round(k * dt, 9))
        previous = current
    return times


# ---------------------------------------------------------------------------
# Reference path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathConfig:
    kind: str = 'sine'
    speed: float = 5.0
    amplitude: float = 1.0
    period: float = 20.0

    @property
    def omega(self):
        return 2.0 * np.pi / self.period

    def lateral_profile(self, s):
        """Path height at longitudinal coordinate s."""
        if self.kind == 'straight':
            return np.zeros_like(np.asarray(s, dtype=np.float64))
        return self.amplitude * np.sin(self.omega * np.asarray(s, dtype=np.float64) / self.speed)


def reference_array(path, times):
    """Reference poses for an array of times, shape (..., 4)."""
    t = np.asarray(times, dtype=np.float64)
    px = path.speed * t
    if path.kind == 'straight':
        py = np.zeros_like(t)
        slope_y = np.zeros_like(t)
    else:
        py = path.amplitude * np.sin(path.omega * t)
        slope_y = path.amplitude * path.omega * np.cos(path.omega * t)
    psi = np.arctan2(slope_y, path.speed)
    v = np.hypot(path.speed, slope_y)
    return np.stack([px, py, psi, v], axis=-1)


def reference_state(path, t):
    _require_finite([t], 'время')
    if t < 0:
        raise ValidationError("Время опорной траектории должно быть неотрицательным", code='out_of_range')
    return VehicleState.from_array(reference_array(path, t))


def lateral_deviation(path, px, py):
    """Absolute perpendicular distance from (px, py) to the reference path."""
    offset = abs(py - float(path.lateral_profile(px)))
    if path.kind == 'straight' or offset == 0.0:
        return offset

    def squared_distance(s):
        return (s - px) ** 2 + (float(path.lateral_profile(s)) - py) ** 2

    result = minimize_scalar(
        squared_distance,
        bounds=(px - offset, px + offset),
        method='bounded',
        options={'xatol': 1e-10},
    )
    return math.sqrt(min(result.fun, offset ** 2))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    segments: int = 200
    length: int = 50
    dt: float = 0.1
    scenarios: tuple = ('S1', 'S2')
    cutoff_hz: float = 1.0
    speed_range: tuple = (2.0, 10.0)
    position_spread: float = 2.0
    heading_spread: float = 0.5


@dataclass(frozen=True)
class Dataset:
    states: np.ndarray  # (segments, length + 1, 4)
    controls: np.ndarray  # (segments, length, 2)
    envs: np.ndarray  # (segments, length, 2)
    dt: float

    @property
    def n_segments(self):
        return self.states.shape[0]

    @property
    def segment_length(self):
        return self.controls.shape[1]

    def __len__(self):
        return self.n_segments * self.segment_length

    def tuples(self):
        """Flat (x, u, e, x_next) arrays in segment-major order."""
        return (
            self.states[:, :-1].reshape(-1, N_X),
            self.controls.reshape(-1, N_U),
            self.envs.reshape(-1, N_E),
            self.states[:, 1:].reshape(-1, N_X),
        )


def excitation_controls(rng, length, dt, cutoff_hz, params=DEFAULT_VEHICLE):
    """Low-pass filtered uniform controls (first-order filter at cutoff_hz)."""
    raw = rng.uniform(-1.0, 1.0, size=(length, N_U)) * params.control_limits
    alpha = dt / (dt + 1.0 / (2.0 * np.pi * cutoff_hz))
    return lfilter([alpha], [1.0, alpha - 1.0], raw, axis=0)


def _segment_envs(rng, tag, length, dt):
    if tag == 'random':
        env = np.array([rng.uniform(MU_MIN, MU_MAX), rng.uniform(-WIND_MAX, WIND_MAX)])
        return np.tile(env, (length, 1))
    scenario = get_scenario(tag)
    start = rng.uniform(0.0, max(scenario.duration - length * dt, 0.0))
    return np.array([scenario_env(scenario, start + k * dt).as_array() for k in range(length)])


def simulate_segment(x0, controls, envs, dt, params=DEFAULT_VEHICLE):
    states = np.empty((len(controls) + 1, N_X))
    states[0] = x0
    for k in range(len(controls)):
        states[k + 1] = bicycle_update(states[k], controls[k], envs[k], dt, params)
    return states


def generate_dataset(cfg, seed, params=DEFAULT_VEHICLE):
    if cfg.segments <= 0 or cfg.length <= 0:
        raise ValidationError("Число сегментов и их длина должны быть положительными", code='empty')
    unknown = set(cfg.scenarios) - set(SCENARIOS) - {'random'}
    if unknown or not cfg.scenarios:
        raise ValidationError(f"Неизвестные сценарии: {sorted(unknown)}", code='invalid_choice')

    states = np.empty((cfg.segments, cfg.length + 1, N_X))
    controls = np.empty((cfg.segments, cfg.length, N_U))
    envs = np.empty((cfg.segments, cfg.length, N_E))

    # One independent stream per segment: results do not depend on generation order.
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(cfg.segments)):
        rng = np.random.default_rng(child)
        tag = cfg.scenarios[rng.integers(len(cfg.scenarios))]
        envs[index] = _segment_envs(rng, tag, cfg.length, cfg.dt)
        x0 = np.array([
            rng.uniform(-cfg.position_spread, cfg.position_spread),
            rng.uniform(-cfg.position_spread, cfg.position_spread),
            rng.uniform(-cfg.heading_spread, cfg.heading_spread),
            rng.uniform(*cfg.speed_range),
        ])
        controls[index] = excitation_controls(rng, cfg.length, cfg.dt, cfg.cutoff_hz, params)
        states[index] = simulate_segment(x0, controls[index], envs[index], cfg.dt, params)

    logger.info(
        "Generated %d segments of length %d (scenarios=%s, seed=%d)",
        cfg.segments, cfg.length, ','.join(cfg.scenarios), seed,
    )
    return Dataset(states, controls, envs, cfg.dt)


DATASET_COLUMNS = [
    'segment_id', 'k', 'px', 'py', 'psi', 'v', 'delta', 'a', 'mu', 'w',
    'px_next', 'py_next', 'psi_next', 'v_next',
]


def _fmt(value):
    return format(float(value), '.17g')


def write_dataset_csv(dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(DATASET_COLUMNS)
        for seg in range(dataset.n_segments):
            for k in range(dataset.segment_length):
                writer.writerow(
                    [seg, k]
                    + [_fmt(v) for v in dataset.states[seg, k]]
                    + [_fmt(v) for v in dataset.controls[seg, k]]
                    + [_fmt(v) for v in dataset.envs[seg, k]]
                    + [_fmt(v) for v in dataset.states[seg, k + 1]]
                )


def read_dataset_csv(path, dt=0.1):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"Файл набора данных не найден: {path}", code='not_found')
    with path.open(newline='') as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != DATASET_COLUMNS:
            raise ValidationError("Неверный заголовок CSV набора данных", code='invalid_format')
        rows = sorted(
            ((int(row['segment_id']), int(row['k']), row) for row in reader),
            key=lambda item: (item[0], item[1]),
        )
    if not rows:
        raise ValidationError("Набор данных пуст", code='empty')

    segments = {}
    for seg, _, row in rows:
        segments.setdefault(seg, []).append(row)
    lengths = {len(seg_rows) for seg_rows in segments.values()}
    if len(lengths) != 1:
        raise ValidationError("Сегменты разной длины", code='invalid_format')
    length = lengths.pop()

    def floats(row, names):
        return [float(row[name]) for name in names]

    states = np.empty((len(segments), length + 1, N_X))
    controls = np.empty((len(segments), length, N_U))
    envs = np.empty((len(segments), length, N_E))
    for index, seg in enumerate(sorted(segments)):
        for k, row in enumerate(segments[seg]):
            state = floats(row, ['px', 'py', 'psi', 'v'])
            if k > 0 and not np.array_equal(states[index, k], state):
                raise ValidationError(
                    f"Нарушена сцепка кортежей в сегменте {seg}, шаг {k}",
                    code='broken_chain',
                )
            states[index, k] = state
            controls[index, k] = floats(row, ['delta', 'a'])
            envs[index, k] = floats(row, ['mu', 'w'])
            states[index, k + 1] = floats(row, ['px_next', 'py_next', 'psi_next', 'v_next'])
    return Dataset(states, controls, envs, dt)
