"""Closed-loop episodes, metrics, the disturbance sweep and trace tables."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from django.core.exceptions import ValidationError

from .koopman import OperatorGen, latent_step, spectral_norms_on_grid
from .mppi import control_step, initial_controller
from .networks import ModelConfig, embed_env, to_tensor, transport, transport_distortion
from .stability import ultimate_bound, violation_rate
from .training import Batch, TrainConfig, build_model, gradient_check, total_loss
from .vehicle import (
    MU_MAX, MU_MIN, WIND_MAX, DatasetConfig, PathConfig, VehicleState, env_grid, excitation_controls,
    generate_dataset, get_scenario, lateral_deviation, reference_state, scenario_env, step_bicycle,
)

logger = logging.getLogger(__name__)

EPISODE_COLUMNS = [
    't', 'px', 'py', 'psi', 'v', 'px_ref', 'py_ref', 'psi_ref', 'v_ref', 'delta', 'a', 'mu', 'w',
    'lateral_dev', 'latent_error', 'threshold', 'min_cost', 'mean_cost', 'ess', 'refused',
]
METRICS_COLUMNS = [
    'method', 'scenario', 'rmse_mean', 'rmse_std', 'smoothness', 'violation_rate', 'recovery_rate',
    'episodes', 'failures',
]

RECOVERY_STEPS = 5
RECOVERY_FACTOR = 2.0
# Pre-switch deviations below this are treated as this level (m).
RECOVERY_FLOOR = 0.01


def _fmt(value):
    return format(float(value), '.17g')


@dataclass
class EpisodeLog:
    scenario: str
    seed: int
    method: str = 'SFKD'
    checkpoint: str = ''
    rows: np.ndarray = field(default_factory=lambda: np.empty((0, len(EPISODE_COLUMNS))))
    failed: bool = False

    def column(self, name):
        return self.rows[:, EPISODE_COLUMNS.index(name)]

    def __len__(self):
        return len(self.rows)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

class LatentMonitor:
    """Open-loop latent prediction tracked against the encoded true state.

    The prediction lives in a frame anchored at the reference position; every
    `horizon` steps it is re-centered to a new anchor, and at environment
    switches it is transported to the new fiber.
    """

    def __init__(self, m, g, horizon):
        self.m = m
        self.g = g
        self.horizon = horizon
        self.anchor = None
        self.env = None
        self.z_hat = None
        self.step_index = 0

    def _encode(self, x, e):
        shifted = np.asarray(x, dtype=np.float64).copy()
        shifted[:2] -= self.anchor
        return self.m.encode(to_tensor(shifted), to_tensor(e))

    @torch.no_grad()
    def observe(self, x, e, anchor):
        """Latent error norm at the current step."""
        anchor = np.asarray(anchor, dtype=np.float64)
        if self.z_hat is None:
            self.anchor, self.env = anchor, e
            self.z_hat = self._encode(x, e)
        else:
            recenter = self.step_index % self.horizon == 0
            if recenter or e != self.env:
                shift = anchor - self.anchor if recenter else np.zeros(2)
                self.z_hat = transport(self.m, self.z_hat, self.env.as_array(), e.as_array(), shift=shift)
                if recenter:
                    self.anchor = anchor
                self.env = e
        return float(torch.linalg.vector_norm(self._encode(x, e) - self.z_hat))

    @torch.no_grad()
    def advance(self, u):
        e = to_tensor(self.env)
        self.z_hat = latent_step(self.m, self.g, self.z_hat, to_tensor(u), embed_env(self.m, e))
        self.step_index += 1


def initial_state(path, rng, lateral_offset=0.1, heading_offset=0.02):
    ref = reference_state(path, 0.0)
    return VehicleState(
        ref.px,
        ref.py + rng.uniform(-lateral_offset, lateral_offset),
        ref.psi + rng.uniform(-heading_offset, heading_offset),
        ref.v,
    )


def run_episode(scenario_id, m, g, cfg, seed, threshold=0.0, path=PathConfig(), duration=None,
                method='SFKD', checkpoint=''):
    """Closed-loop run: MPPI on the learned model, simulator as the plant.

    One row per control step; a refused MPPI update marks the episode failed
    but the run continues so the row count stays duration / dt.
    """
    scenario = get_scenario(scenario_id, duration)
    steps = int(round(scenario.duration / cfg.dt))
    start_stream, control_stream = np.random.SeedSequence(seed).spawn(2)
    x = initial_state(path, np.random.default_rng(start_stream))
    ctrl = initial_controller(cfg, control_stream)
    monitor = LatentMonitor(m, g, cfg.T)
    rows = np.empty((steps, len(EPISODE_COLUMNS)))
    failed = False

    for k in range(steps):
        t = k * cfg.dt
        e = scenario_env(scenario, t)
        ref = reference_state(path, t)
        error = monitor.observe(x.as_array(), e, (ref.px, ref.py))
        u, ctrl = control_step(ctrl, m, g, x, e, path, t, cfg)
        update = ctrl.last_update
        if update.refused and not failed:
            failed = True
            logger.warning("Episode %s seed=%d failed at t=%.1f: MPPI update refused", scenario_id, seed, t)
        rows[k] = [
            t, *x.as_array(), *ref.as_array(), *u.as_array(), *e.as_array(),
            lateral_deviation(path, x.px, x.py), error, threshold,
            update.min_cost, update.mean_cost, update.ess, float(update.refused),
        ]
        monitor.advance(u.as_array())
        x = step_bicycle(x, u, e, cfg.dt)

    log = EpisodeLog(scenario_id, seed, method, checkpoint, rows, failed)
    logger.info("Episode %s %s seed=%d: rmse=%.4f m%s", method, scenario_id, seed,
                episode_rmse(log), ' (failed)' if failed else '')
    return log


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    method: str
    scenario: str
    rmse_mean: float
    rmse_std: float
    smoothness: float
    violation_rate: float
    recovery_rate: float
    episodes: int
    failures: int

    def as_csv_row(self):
        return [self.method, self.scenario] + [
            _fmt(getattr(self, name)) for name in METRICS_COLUMNS[2:7]
        ] + [self.episodes, self.failures]


def episode_rmse(log):
    return float(np.sqrt(np.mean(log.column('lateral_dev') ** 2)))


def steering_rates(log):
    return np.abs(np.diff(log.column('delta'))) / np.diff(log.column('t'))


def threshold_violation_rate(errors, delta_max):
    # A zero threshold (dbar = 0) counts every nonzero error.
    if delta_max > 0:
        return violation_rate(errors, delta_max)
    return float(np.mean(np.asarray(errors) > 0))


def episode_summary(log):
    """(rmse, smoothness, violation rate) of one episode, failed or not."""
    rates = steering_rates(log)
    return (
        episode_rmse(log),
        float(rates.mean()) if rates.size else 0.0,
        threshold_violation_rate(log.column('latent_error'), float(log.column('threshold')[0])),
    )


def switch_indices(log):
    env = log.rows[:, [EPISODE_COLUMNS.index('mu'), EPISODE_COLUMNS.index('w')]]
    return np.flatnonzero(np.any(env[1:] != env[:-1], axis=1)) + 1


def switch_recovery(log, steps=RECOVERY_STEPS, factor=RECOVERY_FACTOR):
    """(recovered, total) over the environment switches of one episode.

    A switch counts as recovered when the lateral deviation `steps` steps
    after it is below `factor` times the mean deviation over the `steps`
    steps before it.
    """
    dev = log.column('lateral_dev')
    recovered = total = 0
    for index in switch_indices(log):
        if index < steps or index + steps >= len(dev):
            continue
        level = max(float(np.mean(dev[index - steps:index])), RECOVERY_FLOOR)
        total += 1
        recovered += int(dev[index + steps] < factor * level)
    return recovered, total


def compute_metrics(logs, delta_max=None):
    if not logs:
        raise ValidationError("Нет эпизодов для расчёта метрик", code='empty')
    if len({log.scenario for log in logs}) != 1:
        raise ValidationError("Эпизоды относятся к разным сценариям", code='mixed_scenarios')
    if len({log.method for log in logs}) != 1:
        raise ValidationError("Эпизоды относятся к разным методам", code='mixed_methods')

    completed = [log for log in logs if not log.failed]
    failures = len(logs) - len(completed)
    if not completed:
        nan = float('nan')
        return MetricsRow(logs[0].method, logs[0].scenario, nan, nan, nan, nan, nan, 0, failures)

    rmse = np.array([episode_rmse(log) for log in completed])
    rates = np.concatenate([steering_rates(log) for log in completed])
    if delta_max is None:
        delta_max = float(completed[0].column('threshold')[0])
    rate = threshold_violation_rate(np.concatenate([log.column('latent_error') for log in completed]), delta_max)

    recovered = total = 0
    for log in completed:
        r, n = switch_recovery(log)
        recovered += r
        total += n

    return MetricsRow(
        method=logs[0].method,
        scenario=logs[0].scenario,
        rmse_mean=float(rmse.mean()),
        rmse_std=float(rmse.std()),
        smoothness=float(rates.mean()) if rates.size else 0.0,
        violation_rate=rate,
        recovery_rate=recovered / total if total else float('nan'),
        episodes=len(completed),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Disturbance sweep
# ---------------------------------------------------------------------------

@torch.no_grad()
def sweep_dbar(m, g, cert, dbar_values, rollouts=20, steps=100, seed=0, dt=0.1):
    """Violation rate of injected-disturbance rollouts against the per-point ultimate bound.

    For each dbar the disturbed latent z+ = f(z, u, e) + w with ||w|| = dbar
    is compared with the undisturbed prediction from the same start.
    Returns rows (dbar, violation_rate, iss_bound).
    """
    rows = []
    for dbar in dbar_values:
        if dbar <= 0:
            raise ValidationError("Значения d̄ должны быть положительными", code='out_of_range')
        delta_max = ultimate_bound(cert.with_dbar(dbar))
        errors = []
        for child in np.random.SeedSequence(seed).spawn(rollouts):
            rng = np.random.default_rng(child)
            e = to_tensor([rng.uniform(MU_MIN, MU_MAX), rng.uniform(-WIND_MAX, WIND_MAX)])
            x0 = to_tensor([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform(2, 10)])
            controls = to_tensor(excitation_controls(rng, steps, dt, 1.0))
            psi = m.embed(e)
            operators = g(psi)
            z_nominal = z_disturbed = m.encode(x0, e, psi)
            for k in range(steps):
                w = rng.standard_normal(m.latent_dim)
                w *= dbar / np.linalg.norm(w)
                z_nominal = latent_step(m, g, z_nominal, controls[k], psi, operators)
                z_disturbed = latent_step(m, g, z_disturbed, controls[k], psi, operators) + to_tensor(w)
                errors.append(float(torch.linalg.vector_norm(z_disturbed - z_nominal)))
        rate = violation_rate(errors, delta_max)
        rows.append((float(dbar), rate, delta_max))
        logger.info("dbar=%.4g: violation rate %.4f against bound %.4g", dbar, rate, delta_max)
    return rows


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

SPECTRAL_AUDIT_POINTS = 33
SPECTRAL_TOLERANCE = 1e-6
GRADIENT_TOLERANCE = 1e-4
GRADIENT_TOLERANCE_HINGE = 1e-3
GRADIENT_AUDIT_MODEL = ModelConfig(
    latent_dim=8, embed_dim=4, psi_hidden=(8,), encoder_hidden=(16,), residual_hidden=(16,),
)


def spectral_audit(m, g, n=SPECTRAL_AUDIT_POINTS):
    """(max dense-SVD ||A(e)||_2 over an n x n environment grid, certified bound)."""
    return float(spectral_norms_on_grid(m, g, env_grid(n)).max()), g.bound


@torch.no_grad()
def distortion_audit(m, pairs=200, seed=0, radius=0.5):
    """Transport distortion ratios over random nearby state pairs and environment pairs.

    Returns (min, median, max) of the ratios.
    """
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(pairs):
        e_from, e_to = (np.array([rng.uniform(MU_MIN, MU_MAX), rng.uniform(-WIND_MAX, WIND_MAX)]) for _ in range(2))
        x = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform(2, 10)])
        step = rng.standard_normal(x.shape)
        x2 = x + step / np.linalg.norm(step) * radius
        z1 = m.encode(to_tensor(x), to_tensor(e_from))
        z2 = m.encode(to_tensor(x2), to_tensor(e_from))
        ratios.append(transport_distortion(m, z1, z2, e_from, e_to))
    ratios = np.asarray(ratios)
    return float(ratios.min()), float(np.median(ratios)), float(ratios.max())


def gradient_audit(models=10, seed=0, entries_per_tensor=8, contraction_points=4):
    """Finite-difference check of the full loss on small random models.

    Parameters are perturbed around the initialization so every loss term is
    active, with ||A(e)|| kept under the projection bound. Returns one
    (error, tolerance) pair per model; the looser tolerance applies when the
    contraction hinge is active.
    """
    d = generate_dataset(DatasetConfig(segments=2, length=4, scenarios=('random',)), seed)
    batch = Batch.from_arrays(*d.tuples())
    contraction_idx = np.arange(min(contraction_points, len(batch.x)))
    results = []
    for index in range(models):
        cfg = TrainConfig(seed=seed + index)
        m = build_model(d, cfg, GRADIENT_AUDIT_MODEL)
        g = OperatorGen.for_model(m)
        generator = torch.Generator().manual_seed(seed + index)
        with torch.no_grad():
            for param in list(m.parameters()) + list(g.parameters()):
                param.add_(0.03 * torch.randn(param.shape, generator=generator, dtype=param.dtype))
        _, parts = total_loss(m, g, batch, cfg, contraction_idx)
        tolerance = GRADIENT_TOLERANCE_HINGE if float(parts['contr']) > 0 else GRADIENT_TOLERANCE
        error = gradient_check(m, g, batch, cfg=cfg, contraction_idx=contraction_idx,
                               max_entries_per_tensor=entries_per_tensor, seed=seed + index)
        logger.info("Gradient check model %d: max relative error %.3e (tolerance %.0e)", index, error, tolerance)
        results.append((error, tolerance))
    return results


# ---------------------------------------------------------------------------
# Traces and files
# ---------------------------------------------------------------------------

def trace_table(logs_by_method):
    """Rows of (t, mu, w, lateral deviation per method) for episodes on a shared time grid."""
    methods = list(logs_by_method)
    if not methods:
        raise ValidationError("Нет эпизодов для трассы", code='empty')
    first = logs_by_method[methods[0]]
    for method in methods[1:]:
        if not np.array_equal(logs_by_method[method].column('t'), first.column('t')):
            raise ValidationError("Эпизоды имеют разную временную сетку", code='invalid_format')
    columns = ['t', 'mu', 'w'] + [f'lateral_dev_{method}' for method in methods]
    data = np.column_stack(
        [first.column('t'), first.column('mu'), first.column('w')]
        + [logs_by_method[method].column('lateral_dev') for method in methods]
    )
    return columns, data


def write_table_csv(path, columns, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in data:
            writer.writerow([_fmt(value) for value in row])
    return path


def write_episode_csv(log, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        handle.write(
            f'# scenario={log.scenario} seed={log.seed} method={log.method} '
            f'checkpoint={log.checkpoint} failed={int(log.failed)}\n'
        )
        writer = csv.writer(handle)
        writer.writerow(EPISODE_COLUMNS)
        for row in log.rows:
            writer.writerow([_fmt(value) for value in row])
    return path


def read_episode_csv(path):
    with Path(path).open(newline='') as handle:
        header = handle.readline()
        if not header.startswith('# '):
            raise ValidationError("Нет строки метаданных эпизода", code='invalid_format')
        meta = dict(item.split('=', 1) for item in header[2:].split())
        reader = csv.reader(handle)
        if next(reader, None) != EPISODE_COLUMNS:
            raise ValidationError("Неверный заголовок CSV эпизода", code='invalid_format')
        rows = np.array([[float(value) for value in row] for row in reader]).reshape(-1, len(EPISODE_COLUMNS))
    return EpisodeLog(
        scenario=meta['scenario'],
        seed=int(meta['seed']),
        method=meta['method'],
        checkpoint=meta.get('checkpoint', ''),
        rows=rows,
        failed=meta.get('failed') == '1',
    )


def write_metrics_csv(path, metrics_rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        for row in metrics_rows:
            writer.writerow(row.as_csv_row())
    return path
