"""ISS certification of the learned latent dynamics and the bounds derived from it."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize
import torch
from decouple import RepositoryEnv
from django.core.exceptions import ValidationError
from scipy.signal import lfilter

from .koopman import latent_step, spectral_norms_on_grid
from .networks import embed_env, to_tensor, wrap_angle
from .vehicle import (
    DEFAULT_VEHICLE, MU_MAX, MU_MIN, N_X, WIND_MAX, env_grid, excitation_controls, simulate_segment,
)

logger = logging.getLogger(__name__)

DEFAULT_QUANTILE = 0.995
LMI_TOLERANCE = 1e-8
CHUNK = 4096


class CertificateRefused(ValidationError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message, code='certificate_refused')
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, eq=False)
class IssCertificate:
    alpha: float
    beta: float
    P: np.ndarray
    c1: float
    c2: float
    dbar: float
    env_grid: np.ndarray
    grid_norms: np.ndarray = None
    grid_margins: np.ndarray = None

    def with_dbar(self, dbar):
        return IssCertificate(self.alpha, self.beta, self.P, self.c1, self.c2, float(dbar), self.env_grid,
                              self.grid_norms, self.grid_margins)


@dataclass(frozen=True)
class ResidualBoundEstimate:
    dbar: float
    rho0: float
    eta_max: float
    sample_count: int
    quantile: float
    max_norm: float
    tail_count: int


@dataclass(frozen=True)
class TrackingBoundInputs:
    eps_mppi: float
    L_phi: float
    eps_phi: float

    def __post_init__(self):
        if min(self.eps_mppi, self.L_phi, self.eps_phi) < 0:
            raise ValidationError("Параметры оценки слежения должны быть неотрицательными", code='out_of_range')


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------

def compute_alpha(g, m, grid=None, beta=None):
    """max over the grid of ||A(e)||_2 + beta, refusing alpha >= 1."""
    grid = env_grid() if grid is None else np.asarray(grid)
    beta = m.beta if beta is None else beta
    norms = spectral_norms_on_grid(m, g, grid)
    worst = int(np.argmax(norms))
    alpha = float(norms[worst]) + beta
    if alpha >= 1.0:
        mu, w = grid[worst]
        raise CertificateRefused(
            f"α = {alpha:.6f} ≥ 1 в среде (mu={mu:.3f}, w={w:.3f})",
            {'alpha': alpha, 'env': [float(mu), float(w)], 'norm_A': float(norms[worst])},
        )
    return alpha


def lyapunov_margins(A, P, alpha):
    """Smallest eigenvalue of P - A^T P A - (1 - alpha^2) I for each A in the stack."""
    A = np.asarray(A)
    identity = np.eye(P.shape[0])
    margins = np.empty(len(A))
    for i, a in enumerate(A):
        M = P - a.T @ P @ a - (1.0 - alpha ** 2) * identity
        margins[i] = scipy.linalg.eigh(0.5 * (M + M.T), eigvals_only=True)[0]
    return margins


def certify(g, m, grid=None, dbar=0.0, P=None, beta=None):
    grid = env_grid() if grid is None else np.asarray(grid)
    beta = m.beta if beta is None else beta
    alpha = compute_alpha(g, m, grid, beta)
    P = np.eye(m.latent_dim) if P is None else np.asarray(P, dtype=np.float64)
    if not np.allclose(P, P.T, atol=1e-12):
        raise ValidationError("Матрица P должна быть симметричной", code='invalid_witness')
    eigenvalues = scipy.linalg.eigh(P, eigvals_only=True)
    if eigenvalues[0] <= 0:
        raise ValidationError("Матрица P должна быть положительно определённой", code='invalid_witness')

    with torch.no_grad():
        A, _ = g(embed_env(m, grid))
    A = A.numpy()
    norms = np.linalg.norm(A, ord=2, axis=(1, 2))
    margins = lyapunov_margins(A, P, alpha)
    worst = int(np.argmin(margins))
    if margins[worst] < -LMI_TOLERANCE:
        mu, w = grid[worst]
        raise CertificateRefused(
            f"Неравенство Ляпунова нарушено в среде (mu={mu:.3f}, w={w:.3f}): {margins[worst]:.3e}",
            {'alpha': alpha, 'env': [float(mu), float(w)], 'margin': float(margins[worst])},
        )

    cert = IssCertificate(
        alpha=alpha,
        beta=float(beta),
        P=P,
        c1=float(np.sqrt(eigenvalues[-1] / eigenvalues[0])),
        c2=float(1.0 / np.sqrt(eigenvalues[0])),
        dbar=float(dbar),
        env_grid=grid,
        grid_norms=norms,
        grid_margins=margins,
    )
    logger.info("Certificate accepted: alpha=%.6f c1=%.4f c2=%.4f dbar=%.4e", cert.alpha, cert.c1, cert.c2, cert.dbar)
    return cert


def iss_trajectory_bound(cert, e0_norm, k):
    if np.any(np.asarray(k) < 0):
        raise ValidationError("Номер шага должен быть неотрицательным", code='out_of_range')
    return cert.c1 * cert.alpha ** np.asarray(k, dtype=np.float64) * e0_norm + cert.c2 * cert.dbar / (1.0 - cert.alpha)


def ultimate_bound(cert):
    return cert.c2 * cert.dbar / (1.0 - cert.alpha)


def realized_iss_bound(cert, e0_norm, disturbance_norms):
    """Bounds b_0..b_K from the realized disturbances: b_{k+1} = alpha b_k + c2 ||d_k||."""
    drive = np.concatenate([[cert.c1 * e0_norm], cert.c2 * np.asarray(disturbance_norms, dtype=np.float64)])
    return lfilter([1.0], [1.0, -cert.alpha], drive)


def violation_rate(latent_error_norms, delta_max):
    series = np.asarray(latent_error_norms, dtype=np.float64)
    if series.size == 0:
        raise ValidationError("Пустой ряд ошибок", code='empty')
    if delta_max <= 0:
        raise ValidationError("delta_max должен быть положительным", code='out_of_range')
    return float(np.count_nonzero(series > delta_max)) / series.size


def tracking_bound(cert, inputs):
    if inputs.L_phi <= 0:
        raise ValidationError("L_phi должен быть положительным", code='out_of_range')
    return (inputs.eps_mppi + ultimate_bound(cert)) / inputs.L_phi + inputs.eps_phi


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

@torch.no_grad()
def one_step_residuals(m, g, x, u, e, x_next, include_residual=True):
    """Returns (||z_k||, ||Delta_k||, ||d_k||) for every tuple, evaluated in chunks."""
    z_norms, delta_norms, d_norms = [], [], []
    for start in range(0, len(x), CHUNK):
        part = slice(start, start + CHUNK)
        e_t = to_tensor(e[part])
        u_t = to_tensor(u[part])
        psi = m.embed(e_t)
        z = m.encode(to_tensor(x[part]), e_t, psi)
        z_next = m.encode(to_tensor(x_next[part]), e_t, psi)
        A, B = g(psi)
        delta = z_next - (A @ z.unsqueeze(-1)).squeeze(-1) - (B @ u_t.unsqueeze(-1)).squeeze(-1)
        d = delta - m.residual_fn(z, u_t, psi) if include_residual else delta
        z_norms.append(torch.linalg.vector_norm(z, dim=-1))
        delta_norms.append(torch.linalg.vector_norm(delta, dim=-1))
        d_norms.append(torch.linalg.vector_norm(d, dim=-1))
    return tuple(torch.cat(parts).numpy() for parts in (z_norms, delta_norms, d_norms))


def estimate_dbar(m, g, d, quantile=DEFAULT_QUANTILE, include_residual=True):
    if len(d) == 0:
        raise ValidationError("Набор данных пуст", code='empty')
    if not 0.9 < quantile <= 1.0:
        raise ValidationError("Квантиль должен лежать в (0.9, 1]", code='out_of_range')
    z_norms, delta_norms, d_norms = one_step_residuals(m, g, *d.tuples(), include_residual=include_residual)
    dbar = float(np.quantile(d_norms, quantile))

    # |Delta| <= rho0 |z| + eta: non-negative slope by least squares, offset lifted to cover every sample.
    (rho0, _), _ = scipy.optimize.nnls(np.column_stack([z_norms, np.ones_like(z_norms)]), delta_norms)
    eta_max = max(float(np.max(delta_norms - rho0 * z_norms)), 0.0)

    estimate = ResidualBoundEstimate(
        dbar=dbar,
        rho0=float(rho0),
        eta_max=eta_max,
        sample_count=len(d_norms),
        quantile=quantile,
        max_norm=float(d_norms.max()),
        tail_count=int(np.count_nonzero(d_norms > dbar)),
    )
    logger.info("dbar=%.4e at q=%.4f (%d of %d samples above), rho0=%.4f eta=%.4e",
                estimate.dbar, quantile, estimate.tail_count, estimate.sample_count, estimate.rho0, estimate.eta_max)
    return estimate


@torch.no_grad()
def estimate_lipschitz(m, states, envs, n_pairs=100_000, radius=0.05, seed=0):
    """Empirical encoder Lipschitz constant: max ||Phi(x,e) - Phi(x',e)|| / ||x - x'|| over nearby pairs."""
    states = np.asarray(states, dtype=np.float64)
    envs = np.asarray(envs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = 0.0
    for start in range(0, n_pairs, CHUNK):
        count = min(CHUNK, n_pairs - start)
        index = rng.integers(len(states), size=count)
        direction = rng.standard_normal((count, N_X))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        step = direction * rng.uniform(0.1, 1.0, size=(count, 1)) * radius
        e = to_tensor(envs[index])
        z1 = m.encode(to_tensor(states[index]), e)
        z2 = m.encode(to_tensor(states[index] + step), e)
        ratio = torch.linalg.vector_norm(z1 - z2, dim=-1) / torch.as_tensor(np.linalg.norm(step, axis=1))
        best = max(best, float(ratio.max()))
    return best


@torch.no_grad()
def estimate_reconstruction_error(m, states, envs):
    """Largest ||x - decode(encode(x, e))|| over the given states, heading difference wrapped."""
    worst = 0.0
    for start in range(0, len(states), CHUNK):
        x = to_tensor(states[start:start + CHUNK])
        diff = x - m.decode(m.encode(x, to_tensor(envs[start:start + CHUNK])))
        diff = torch.cat([diff[..., :2], wrap_angle(diff[..., 2:3]), diff[..., 3:]], dim=-1)
        worst = max(worst, float(torch.linalg.vector_norm(diff, dim=-1).max()))
    return worst


# ---------------------------------------------------------------------------
# Soundness audit
# ---------------------------------------------------------------------------

@dataclass
class SoundnessReport:
    rollouts: int = 0
    steps: int = 0
    conforming_steps: int = 0
    excluded_steps: int = 0
    violations: int = 0
    realized_violations: int = 0
    traces: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0


@torch.no_grad()
def soundness_audit(m, g, cert, rollouts=100, steps=200, seed=0, dt=0.1, initial_offset=0.1,
                    params=DEFAULT_VEHICLE, keep_traces=1):
    """Open-loop model-vs-simulator rollouts under constant environments.

    e_k = Phi(x_k, e) - zhat_k where zhat follows the learned dynamics from a
    perturbed initial latent and x follows the simulator under the same
    controls. The closed-form bound is checked on steps whose realized
    disturbances so far all stay within dbar; the realized-disturbance bound
    is checked on every step.
    """
    report = SoundnessReport()
    tolerance = 1e-9
    for child in np.random.SeedSequence(seed).spawn(rollouts):
        rng = np.random.default_rng(child)
        e = np.array([rng.uniform(MU_MIN, MU_MAX), rng.uniform(-WIND_MAX, WIND_MAX)])
        x0 = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.5, 0.5), rng.uniform(2, 10)])
        controls = excitation_controls(rng, steps, dt, 1.0, params)
        envs = np.tile(e, (steps, 1))
        states = simulate_segment(x0, controls, envs, dt, params)

        e_t = to_tensor(e).expand(steps + 1, -1)
        psi = m.embed(e_t)
        z_true = m.encode(to_tensor(states), e_t, psi)
        u_t = to_tensor(controls)
        operators = g(psi[0])
        d_norms = torch.linalg.vector_norm(
            z_true[1:] - latent_step(m, g, z_true[:-1], u_t, psi[:-1], operators), dim=-1,
        ).numpy()

        offset = rng.standard_normal(m.latent_dim)
        z_hat = z_true[0] + to_tensor(offset / np.linalg.norm(offset) * initial_offset)
        errors = np.empty(steps + 1)
        errors[0] = float(torch.linalg.vector_norm(z_true[0] - z_hat))
        for k in range(steps):
            z_hat = latent_step(m, g, z_hat, u_t[k], psi[k], operators)
            errors[k + 1] = float(torch.linalg.vector_norm(z_true[k + 1] - z_hat))

        bounds = iss_trajectory_bound(cert, errors[0], np.arange(steps + 1))
        realized = realized_iss_bound(cert, errors[0], d_norms)
        conforming = np.concatenate([[True], np.cumprod(d_norms <= cert.dbar + tolerance).astype(bool)])
        violated = errors > bounds * (1 + tolerance) + tolerance

        report.rollouts += 1
        report.steps += steps + 1
        report.conforming_steps += int(conforming.sum())
        report.excluded_steps += int((~conforming).sum())
        report.violations += int(np.count_nonzero(violated & conforming))
        report.realized_violations += int(np.count_nonzero(errors > realized * (1 + tolerance) + tolerance))
        if len(report.traces) < keep_traces:
            report.traces.append((errors, bounds, violated & conforming))

    logger.info("Soundness audit: %d rollouts, %d conforming steps, %d excluded, %d violations",
                report.rollouts, report.conforming_steps, report.excluded_steps, report.violations)
    return report


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_certificate(cert, directory, extra=None):
    """Writes certificate.txt (KEY=value lines), certificate_grid.csv and certificate_P.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    values = {
        'ALPHA': cert.alpha,
        'BETA': cert.beta,
        'C1': cert.c1,
        'C2': cert.c2,
        'DBAR': cert.dbar,
        'ULTIMATE_BOUND': ultimate_bound(cert),
        'GRID_POINTS': len(cert.env_grid),
        'LATENT_DIM': cert.P.shape[0],
    }
    values.update(extra or {})
    text_path = directory / 'certificate.txt'
    with text_path.open('w') as handle:
        handle.write('# ISS certificate, Lyapunov witness in certificate_P.csv\n')
        for key, value in values.items():
            handle.write(f'{key}={format(value, ".17g") if isinstance(value, float) else value}\n')

    grid_path = directory / 'certificate_grid.csv'
    with grid_path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['mu', 'w', 'norm_A', 'min_eig'])
        for (mu, w), norm, margin in zip(cert.env_grid, cert.grid_norms, cert.grid_margins):
            writer.writerow([format(float(v), '.17g') for v in (mu, w, norm, margin)])

    p_path = directory / 'certificate_P.csv'
    np.savetxt(p_path, cert.P, delimiter=',', fmt='%.17g')
    return text_path, grid_path, p_path


def read_certificate(directory):
    directory = Path(directory)
    if not (directory / 'certificate.txt').is_file():
        raise ValidationError(f"Сертификат не найден: {directory}", code='not_found')
    values = RepositoryEnv(str(directory / 'certificate.txt'))
    P = np.loadtxt(directory / 'certificate_P.csv', delimiter=',', ndmin=2)
    grid = np.loadtxt(directory / 'certificate_grid.csv', delimiter=',', skiprows=1, ndmin=2)
    return IssCertificate(
        alpha=float(values['ALPHA']),
        beta=float(values['BETA']),
        P=P,
        c1=float(values['C1']),
        c2=float(values['C2']),
        dbar=float(values['DBAR']),
        env_grid=grid[:, :2],
        grid_norms=grid[:, 2],
        grid_margins=grid[:, 3],
    )


def write_violation_trace_csv(path, errors, bounds, violated):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['k', 'error_norm', 'bound', 'violated'])
        for k, (error, bound, flag) in enumerate(zip(errors, bounds, violated)):
            writer.writerow([k, format(float(error), '.17g'), format(float(bound), '.17g'), int(bool(flag))])
    return path
