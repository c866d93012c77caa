"""Trainable nonlinear components: embedding, encoder, decoder and residual."""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from django.core.exceptions import ValidationError
from torch import nn

from .vehicle import DEFAULT_VEHICLE, MU_MAX, MU_MIN, N_E, N_U, N_X, WIND_MAX

logger = logging.getLogger(__name__)

DTYPE = torch.float64

HEADING = 2


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    embed_dim: int = 8
    psi_hidden: tuple = (16,)
    encoder_hidden: tuple = (64, 64)
    residual_hidden: tuple = (64, 64, 64)
    beta: float = 0.15
    eps0: float = 0.02
    conditioned: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0) or self.eps0 <= 0.0 or self.beta + self.eps0 >= 1.0:
            raise ValidationError(
                f"Требуется 0 < beta < 1, eps0 > 0 и beta + eps0 < 1 (beta={self.beta}, eps0={self.eps0})",
                code='out_of_range',
            )
        if self.latent_dim <= 0 or self.embed_dim <= 0:
            raise ValidationError("Размерности должны быть положительными", code='out_of_range')

    @property
    def spectral_bound(self):
        return 1.0 - self.beta - self.eps0


def to_tensor(value):
    """Domain value (VehicleState, EnvInput, ...), array or tensor to a float64 tensor."""
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    if hasattr(value, 'as_array'):
        value = value.as_array()
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def wrap_angle(angle):
    return angle - 2.0 * math.pi * torch.ceil((angle - math.pi) / (2.0 * math.pi))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class Mlp(nn.Module):
    """tanh MLP with Glorot-uniform weights and zero biases."""

    def __init__(self, sizes, generator, zero_output=False):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=DTYPE) for n_in, n_out in zip(sizes[:-1], sizes[1:])
        )
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
                noise = torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE)
                layer.weight.copy_((2.0 * noise - 1.0) * bound)
                layer.bias.zero_()
            if zero_output:
                self.layers[-1].weight.zero_()

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


class SfkdModel(nn.Module):
    def __init__(self, config=ModelConfig()):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        r, d_e = config.latent_dim, config.embed_dim
        self.psi_net = Mlp((N_E, *config.psi_hidden, d_e), generator)
        self.encoder = Mlp((N_X + d_e, *config.encoder_hidden, r), generator)
        self.decoder = Mlp((r, *reversed(config.encoder_hidden), N_X), generator)
        # Zero output layer: training starts from the pure Koopman model.
        self.residual = Mlp((r + N_U + d_e, *config.residual_hidden, r), generator, zero_output=True)

        self.register_buffer('x_mean', torch.zeros(N_X, dtype=DTYPE))
        self.register_buffer('x_scale', torch.ones(N_X, dtype=DTYPE))
        self.register_buffer('e_mean', torch.tensor([(MU_MIN + MU_MAX) / 2, 0.0], dtype=DTYPE))
        self.register_buffer('e_scale', torch.tensor([(MU_MAX - MU_MIN) / 2, WIND_MAX], dtype=DTYPE))
        self.register_buffer('u_scale', torch.tensor(DEFAULT_VEHICLE.control_limits, dtype=DTYPE))

    @property
    def latent_dim(self):
        return self.config.latent_dim

    @property
    def beta(self):
        return self.config.beta

    @property
    def eps0(self):
        return self.config.eps0

    def fit_normalizer(self, states):
        """Sets the state normalizer from an (N, 4) array of physical states."""
        states = to_tensor(states).reshape(-1, N_X)
        scale = states.std(dim=0)
        scale[HEADING] = 1.0
        with torch.no_grad():
            self.x_mean.copy_(states.mean(dim=0))
            self.x_mean[HEADING] = 0.0
            self.x_scale.copy_(torch.where(scale > 1e-6, scale, torch.ones_like(scale)))

    def embed(self, e):
        return self.psi_net((e - self.e_mean) / self.e_scale)

    def encode(self, x, e, psi=None):
        if psi is None:
            psi = self.embed(e)
        if not self.config.conditioned:
            psi = torch.zeros_like(psi)
        return self.encoder(torch.cat([(x - self.x_mean) / self.x_scale, psi], dim=-1))

    def decode(self, z):
        out = self.decoder(z) * self.x_scale + self.x_mean
        return torch.cat([out[..., :HEADING], wrap_angle(out[..., HEADING:HEADING + 1]), out[..., HEADING + 1:]], dim=-1)

    def residual_fn(self, z, u, psi):
        return self.residual(torch.cat([z, u / self.u_scale, psi], dim=-1))


# ---------------------------------------------------------------------------
# Inference API
# ---------------------------------------------------------------------------

@torch.no_grad()
def embed_env(m, e):
    e = to_tensor(e)
    _check_finite(e)
    return m.embed(e)


@torch.no_grad()
def encode(m, x, e):
    x, e = to_tensor(x), to_tensor(e)
    _check_finite(x, e)
    return m.encode(x, e)


@torch.no_grad()
def decode(m, z):
    z = to_tensor(z)
    _check_finite(z)
    return m.decode(z)


@torch.no_grad()
def residual_forward(m, z, u, e):
    z, u, e = to_tensor(z), to_tensor(u), to_tensor(e)
    _check_finite(z, u, e)
    return m.residual_fn(z, u, embed_env(m, e))


@torch.no_grad()
def transport(m, z, e_from, e_to, shift=None):
    """Moves a latent from the fiber over e_from to the fiber over e_to.

    The decoder ignores the environment, so e_from only names the source fiber.
    An optional planar shift (dx, dy) re-centers the physical frame on the way.
    """
    z = to_tensor(z)
    x = m.decode(z)
    if shift is not None:
        offset = torch.zeros(N_X, dtype=DTYPE)
        offset[:2] = to_tensor(shift)
        x = x - offset
    return m.encode(x, to_tensor(e_to))


@torch.no_grad()
def transport_distortion(m, z1, z2, e_from, e_to):
    """Ratio of latent distances after and before transport (1 means isometric)."""
    before = torch.linalg.vector_norm(to_tensor(z1) - to_tensor(z2))
    after = torch.linalg.vector_norm(transport(m, z1, e_from, e_to) - transport(m, z2, e_from, e_to))
    return float(after / before)


def _check_finite(*tensors):
    for tensor in tensors:
        if not torch.all(torch.isfinite(tensor)):
            raise ValidationError("Нечисловое значение на входе сети", code='non_finite')


# ---------------------------------------------------------------------------
# Spectral norms
# ---------------------------------------------------------------------------

def _start_vector(n):
    generator = torch.Generator().manual_seed(0)
    v = torch.randn(n, generator=generator, dtype=DTYPE)
    return v / torch.linalg.vector_norm(v)


@torch.no_grad()
def top_singular_vectors(J, max_iter=200, tol=1e-12):
    """Power iteration on J^T J for a batch of matrices (..., m, n).

    Returns (u, v, sigma, converged) with J v = sigma u.
    """
    v = _start_vector(J.shape[-1]).expand(*J.shape[:-2], -1).clone()
    sigma = torch.zeros(J.shape[:-2], dtype=DTYPE)
    converged = False
    for _ in range(max_iter):
        jv = (J @ v.unsqueeze(-1)).squeeze(-1)
        w = (J.transpose(-1, -2) @ jv.unsqueeze(-1)).squeeze(-1)
        norm = torch.linalg.vector_norm(w, dim=-1, keepdim=True)
        v = torch.where(norm > 0, w / norm.clamp_min(1e-300), v)
        new_sigma = torch.linalg.vector_norm((J @ v.unsqueeze(-1)).squeeze(-1), dim=-1)
        if torch.all(torch.abs(new_sigma - sigma) <= tol * new_sigma.clamp_min(1e-300)):
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    jv = (J @ v.unsqueeze(-1)).squeeze(-1)
    u = jv / sigma.unsqueeze(-1).clamp_min(1e-300)
    return u, v, sigma, converged


def spectral_project(W, bound, n_iter=20, tol=1e-8):
    """Scales W (or a batch of matrices) so that its spectral norm is at most bound.

    The norm is a power-iteration estimate u^T W v with u, v held fixed, so the
    scaling stays differentiable; the estimate is raised to the exact norm when
    the iteration under-reads, keeping the bound exact.
    """
    if bound <= 0:
        raise ValidationError("Граница спектральной нормы должна быть положительной", code='out_of_range')
    u, v, _, _ = top_singular_vectors(W.detach(), max_iter=n_iter, tol=tol)
    estimate = (u * (W @ v.unsqueeze(-1)).squeeze(-1)).sum(dim=-1)
    with torch.no_grad():
        exact = torch.linalg.matrix_norm(W.detach(), ord=2)
        ratio = torch.where(estimate.detach() > 0, exact / estimate.detach().clamp_min(1e-300), torch.ones_like(exact))
    sigma = estimate * ratio
    scale = torch.where(sigma > bound, bound / sigma.clamp_min(1e-300), torch.ones_like(sigma))
    return W * scale.unsqueeze(-1).unsqueeze(-1)


class JacobianNorm(NamedTuple):
    value: float
    converged: bool


def residual_jacobian_norm(m, z, u, e, max_iter=500, tol=1e-12):
    """Spectral norm of dr/dz at one point, matrix-free.

    Power iteration on J^T J driven by forward-mode (J v) and reverse-mode
    (J^T w) products. Without convergence the Frobenius norm is returned,
    which bounds the spectral norm from above.
    """
    z, u, e = to_tensor(z), to_tensor(u), to_tensor(e)
    _check_finite(z, u, e)
    with torch.no_grad():
        psi = m.embed(e)

    def f(z_):
        return m.residual_fn(z_, u, psi)

    _, vjp_fn = torch.func.vjp(f, z)
    v = _start_vector(z.shape[-1])
    sigma = 0.0
    for _ in range(max_iter):
        _, jv = torch.func.jvp(f, (z,), (v,))
        (w,) = vjp_fn(jv)
        norm = float(torch.linalg.vector_norm(w))
        if norm == 0.0:
            return JacobianNorm(0.0, True)
        v = (w / norm).detach()
        _, jv = torch.func.jvp(f, (z,), (v,))
        new_sigma = float(torch.linalg.vector_norm(jv))
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return JacobianNorm(new_sigma, True)
        sigma = new_sigma

    jacobian = torch.func.jacrev(f)(z).detach()
    upper = float(torch.linalg.matrix_norm(jacobian, ord='fro'))
    logger.warning("Power iteration did not converge in %d steps; using Frobenius bound %.6g", max_iter, upper)
    return JacobianNorm(upper, False)


def residual_jacobians(m, z, u, psi):
    """Explicit batch of residual Jacobians dr/dz, shape (S, r, r)."""
    def single(z_, u_, psi_):
        return m.residual_fn(z_, u_, psi_)

    return torch.func.vmap(torch.func.jacrev(single, argnums=0))(z, u, psi)
