"""Sampling-based MPPI control over SFKD latent rollouts."""

import copy
import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.linalg
import torch
from django.core.exceptions import ValidationError

from .koopman import latent_step
from .networks import embed_env, to_tensor, wrap_angle
from .vehicle import DEFAULT_VEHICLE, N_U, ControlInput, reference_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MppiConfig:
    M: int = 512
    T: int = 20
    sigma_u: tuple = (0.05, 0.3)
    lambda_temp: float = 1.0
    lambda_latent: float = 1.0
    w_lat: float = 10.0
    w_head: float = 2.0
    w_u: float = 0.1
    terminal_lat: float = 50.0
    terminal_head: float = 10.0
    dt: float = 0.1
    iterations: int = 1

    def __post_init__(self):
        if self.M < 1 or self.T < 1 or self.iterations < 1:
            raise ValidationError("M, T и iterations должны быть не меньше 1", code='out_of_range')
        if len(self.sigma_u) != N_U or min(self.sigma_u) <= 0:
            raise ValidationError("sigma_u: по одному положительному значению на канал управления",
                                  code='out_of_range')
        if self.lambda_temp <= 0 or self.dt <= 0:
            raise ValidationError("lambda_temp и dt должны быть положительными", code='out_of_range')
        if min(self.lambda_latent, self.w_lat, self.w_head, self.w_u, self.terminal_lat, self.terminal_head) < 0:
            raise ValidationError("Веса стоимости должны быть неотрицательными", code='out_of_range')

    def scaled(self, factor):
        """Same horizon and noise with every cost weight multiplied by factor."""
        return replace(
            self,
            lambda_latent=self.lambda_latent * factor,
            w_lat=self.w_lat * factor,
            w_head=self.w_head * factor,
            w_u=self.w_u * factor,
            terminal_lat=self.terminal_lat * factor,
            terminal_head=self.terminal_head * factor,
        )


class UpdateResult(NamedTuple):
    U: np.ndarray
    weights: np.ndarray
    ess: float
    refused: bool
    min_cost: float
    mean_cost: float


@dataclass(frozen=True)
class ControllerState:
    U: np.ndarray  # (T, 2) nominal sequence
    previous: np.ndarray  # last applied control
    rng: np.random.Generator
    last_update: UpdateResult = None


def initial_controller(cfg, seed):
    return ControllerState(np.zeros((cfg.T, N_U)), np.zeros(N_U), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Cost and update
# ---------------------------------------------------------------------------

def pose_errors(states, refs):
    """Cross-track distance and wrapped heading error in the reference frame."""
    psi_r = refs[..., 2]
    d_lat = -(states[..., 0] - refs[..., 0]) * torch.sin(psi_r) + (states[..., 1] - refs[..., 1]) * torch.cos(psi_r)
    return d_lat, wrap_angle(states[..., 2] - psi_r)


@torch.no_grad()
def rollout_costs(m, g, z0, controls, ref_states, ref_latents, psi, cfg, operators=None):
    """Costs of M control sequences (M, T, 2) rolled out from z0.

    ref_states (T+1, 4) and ref_latents (T+1, r) start at the current time;
    stage k scores the state reached after applying control k. Non-finite
    rollouts cost +inf.
    """
    controls = to_tensor(controls)
    ref_states = to_tensor(ref_states)
    ref_latents = to_tensor(ref_latents)
    operators = g(psi) if operators is None else operators
    n, horizon = controls.shape[0], controls.shape[1]
    z = to_tensor(z0).expand(n, -1)
    psi_batch = psi.expand(n, -1)
    cost = torch.zeros(n, dtype=z.dtype)
    for k in range(horizon):
        u = controls[:, k]
        z = latent_step(m, g, z, u, psi_batch, operators)
        x = m.decode(z)
        d_lat, d_head = pose_errors(x, ref_states[k + 1])
        cost = cost + (
            cfg.w_lat * d_lat ** 2
            + cfg.w_head * d_head ** 2
            + cfg.w_u * (u ** 2).sum(dim=-1)
            + cfg.lambda_latent * ((z - ref_latents[k + 1]) ** 2).sum(dim=-1)
        )
    cost = cost + cfg.terminal_lat * d_lat ** 2 + cfg.terminal_head * d_head ** 2
    cost = torch.where(torch.isfinite(cost), cost, torch.full_like(cost, float('inf')))
    return cost.numpy()


def rollout_cost(m, g, z0, U_pert, refs, cfg, e):
    """Cost of a single control sequence; refs = (ref_states, ref_latents)."""
    psi = embed_env(m, e)
    return float(rollout_costs(m, g, z0, np.asarray(U_pert)[None], refs[0], refs[1], psi, cfg)[0])


def mppi_weighted_update(U, perturbations, costs, cfg, limits=DEFAULT_VEHICLE.control_limits):
    """Softmax-weighted perturbation average with min-cost baseline, then saturation.

    Infinite costs get weight exactly 0; if every cost is infinite the nominal
    sequence is kept and the result is marked refused.
    """
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        return UpdateResult(np.array(U, dtype=np.float64), np.zeros(len(costs)), 0.0, True, np.inf, np.inf)
    baseline = costs[finite].min()
    weights = np.zeros(len(costs))
    weights[finite] = np.exp(-(costs[finite] - baseline) / cfg.lambda_temp)
    weights /= weights.sum()
    updated = np.asarray(U) + np.einsum('m,mtc->tc', weights, np.asarray(perturbations))
    limits = np.asarray(limits, dtype=np.float64)
    return UpdateResult(
        np.clip(updated, -limits, limits),
        weights,
        float(1.0 / np.sum(weights ** 2)),
        False,
        float(baseline),
        float(costs[finite].mean()),
    )


def sample_and_update(U, rng, cost_fn, cfg, limits, sigma=None):
    """cfg.iterations rounds of sampling, scoring and weighted update."""
    limits = np.asarray(limits, dtype=np.float64)
    sigma = np.asarray(cfg.sigma_u if sigma is None else sigma, dtype=np.float64)
    result = None
    for _ in range(cfg.iterations):
        perturbations = rng.standard_normal((cfg.M,) + U.shape) * sigma
        candidates = np.clip(U + perturbations, -limits, limits)
        result = mppi_weighted_update(U, perturbations, cost_fn(candidates), cfg, limits)
        U = result.U
    return U, result


# ---------------------------------------------------------------------------
# Receding horizon
# ---------------------------------------------------------------------------

def local_frame(path, t, cfg):
    """Reference poses over the horizon and the planar anchor of the local frame."""
    ref = reference_array(path, t + cfg.dt * np.arange(cfg.T + 1))
    anchor = ref[0, :2].copy()
    ref[:, :2] -= anchor
    return ref, anchor


def control_step(ctrl, m, g, x_t, e_t, path, t, cfg, params=DEFAULT_VEHICLE):
    """One MPPI step; returns (applied ControlInput, next ControllerState).

    States are expressed relative to the reference position at time t, the
    environment is held at e_t over the horizon and the nominal sequence is
    shifted with its last entry repeated.
    """
    rng = copy.deepcopy(ctrl.rng)
    ref, anchor = local_frame(path, t, cfg)
    x_local = to_tensor(x_t).clone()
    x_local[:2] -= to_tensor(anchor)
    e = to_tensor(e_t)
    psi = embed_env(m, e)
    with torch.no_grad():
        z0 = m.encode(x_local, e, psi)
        ref_latents = m.encode(to_tensor(ref), e.expand(len(ref), -1), psi.expand(len(ref), -1))
        operators = g(psi)

    def cost_fn(candidates):
        return rollout_costs(m, g, z0, candidates, ref, ref_latents, psi, cfg, operators)

    U, result = sample_and_update(np.array(ctrl.U, dtype=np.float64), rng, cost_fn, cfg, params.control_limits)
    if result.refused:
        logger.warning("MPPI update refused at t=%.2f: every rollout cost is infinite", t)
    applied = U[0].copy()
    shifted = np.vstack([U[1:], U[-1:]])
    return ControlInput.from_array(applied), ControllerState(shifted, applied, rng, result)


# ---------------------------------------------------------------------------
# Double-integrator benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoubleIntegrator:
    dt: float = 0.1
    q: tuple = (1.0, 0.1)
    r: float = 0.1
    u_max: float = 10.0

    @property
    def A(self):
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    @property
    def B(self):
        return np.array([[0.5 * self.dt ** 2], [self.dt]])

    @property
    def Q(self):
        return np.diag(self.q)

    @property
    def R(self):
        return np.array([[self.r]])

    def riccati(self):
        return scipy.linalg.solve_discrete_are(self.A, self.B, self.Q, self.R)

    def lqr_gain(self):
        P = self.riccati()
        return np.linalg.solve(self.R + self.B.T @ P @ self.B, self.B.T @ P @ self.A)


def double_integrator_costs(system, x0, controls, P_terminal):
    """Quadratic cost of (M, T, 1) control sequences with terminal x^T P x."""
    n = controls.shape[0]
    x = np.tile(np.asarray(x0, dtype=np.float64), (n, 1))
    cost = np.zeros(n)
    for k in range(controls.shape[1]):
        u = controls[:, k]
        cost += np.einsum('mi,ij,mj->m', x, system.Q, x) + system.r * u[:, 0] ** 2
        x = x @ system.A.T + u @ system.B.T
    return cost + np.einsum('mi,ij,mj->m', x, P_terminal, x)


def lqr_benchmark(x0=(1.0, 0.0), steps=60, M=2000, T=20, seeds=10, sigma=1.0, lambda_temp=1.0, iterations=1,
                  system=DoubleIntegrator()):
    """Realized MPPI episode cost against the LQR optimum x0^T P x0.

    MPPI rolls out the true linear dynamics with the Riccati solution as the
    terminal cost; the realized cost closes the episode with the same
    terminal term. Returns (mean MPPI cost, LQR cost).
    """
    P = system.riccati()
    cfg = MppiConfig(M=M, T=T, sigma_u=(sigma, sigma), lambda_temp=lambda_temp, dt=system.dt, iterations=iterations)
    limits = np.array([system.u_max])
    realized = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = np.asarray(x0, dtype=np.float64)
        U = np.zeros((T, 1))
        total = 0.0
        for _ in range(steps):
            U, _ = sample_and_update(
                U, rng, lambda candidates, x=x: double_integrator_costs(system, x, candidates, P),
                cfg, limits, sigma=(sigma,),
            )
            u = U[0]
            total += float(x @ system.Q @ x) + system.r * float(u[0]) ** 2
            x = system.A @ x + system.B @ u
            U = np.vstack([U[1:], U[-1:]])
        realized.append(total + float(x @ P @ x))
    optimal = float(np.asarray(x0) @ P @ np.asarray(x0))
    logger.info("LQR benchmark: MPPI %.6f vs LQR %.6f", np.mean(realized), optimal)
    return float(np.mean(realized)), optimal
