"""Environment-conditioned Koopman operators A(e), B(e) and their warm start."""

import csv
import logging
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
from django.core.exceptions import ValidationError
from torch import nn

from .networks import DTYPE, embed_env, spectral_project, to_tensor
from .vehicle import N_U, env_grid

logger = logging.getLogger(__name__)

# Quantization steps (mu, w) used to group observed environments into clusters.
CLUSTER_RESOLUTION = (0.1, 1.0)


class OperatorGen(nn.Module):
    MODE_CONDITIONED = 'conditioned'
    MODE_GLOBAL = 'global'
    MODE_CHOICES = (MODE_CONDITIONED, MODE_GLOBAL)

    def __init__(self, latent_dim, embed_dim, bound, mode=MODE_CONDITIONED, n_u=N_U):
        super().__init__()
        if mode not in self.MODE_CHOICES:
            raise ValidationError(f"Неизвестный режим генератора: {mode}", code='invalid_choice')
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.n_u = n_u
        self.bound = float(bound)
        self.mode = mode
        self.gen_A = nn.Linear(embed_dim, latent_dim * latent_dim, dtype=DTYPE)
        self.gen_B = nn.Linear(embed_dim, latent_dim * n_u, dtype=DTYPE)
        with torch.no_grad():
            for layer in (self.gen_A, self.gen_B):
                layer.weight.zero_()
                layer.bias.zero_()

    @classmethod
    def for_model(cls, model):
        mode = cls.MODE_CONDITIONED if model.config.conditioned else cls.MODE_GLOBAL
        return cls(model.latent_dim, model.config.embed_dim, model.config.spectral_bound, mode)

    def describe(self):
        return {
            'latent_dim': self.latent_dim,
            'embed_dim': self.embed_dim,
            'n_u': self.n_u,
            'bound': self.bound,
            'mode': self.mode,
        }

    def _input(self, psi):
        # Global mode sees a constant input, so the biases alone are A and B.
        return torch.zeros_like(psi) if self.mode == self.MODE_GLOBAL else psi

    def raw(self, psi):
        p = self._input(psi)
        A = self.gen_A(p).unflatten(-1, (self.latent_dim, self.latent_dim))
        B = self.gen_B(p).unflatten(-1, (self.latent_dim, self.n_u))
        return A, B

    def forward(self, psi):
        A, B = self.raw(psi)
        return spectral_project(A, self.bound), B


@torch.no_grad()
def eval_operators(g, psi_e):
    psi_e = to_tensor(psi_e)
    if not torch.all(torch.isfinite(psi_e)):
        raise ValidationError("Нечисловое вложение среды", code='non_finite')
    return g(psi_e)


def latent_step(model, g, z, u, psi, operators=None):
    """One step of z+ = A(e) z + B(e) u + r(z, u, e)."""
    A, B = g(psi) if operators is None else operators
    linear = (A @ z.unsqueeze(-1)).squeeze(-1) + (B @ u.unsqueeze(-1)).squeeze(-1)
    return linear + model.residual_fn(z, u, psi)


@torch.no_grad()
def operators_for_env(model, g, e):
    return g(embed_env(model, e))


# ---------------------------------------------------------------------------
# Warm start
# ---------------------------------------------------------------------------

def environment_clusters(envs, resolution=CLUSTER_RESOLUTION):
    """Groups environments by quantized (mu, w).

    Returns (labels, centers) with clusters numbered in sorted key order and
    each center the mean of its members taken in sorted order.
    """
    envs = np.asarray(envs, dtype=np.float64)
    keys = np.round(envs / np.asarray(resolution)).astype(np.int64)
    unique, labels = np.unique(keys, axis=0, return_inverse=True)
    labels = labels.reshape(-1)
    centers = np.empty((len(unique), envs.shape[1]))
    for c in range(len(unique)):
        members = envs[labels == c]
        members = members[np.lexsort(members.T[::-1])]
        centers[c] = members.mean(axis=0)
    return labels, centers


def solve_cluster_operators(Z, U, Zn, mu_reg):
    """Ridge-regularized least squares for z+ = A z + B u.

    Solves the normal equations of min sum ||z+ - A z - B u||^2 + mu_reg ||A||_F^2.
    Rows are put in a canonical order first so the result does not depend on
    how the samples were ordered.
    """
    if mu_reg < 0:
        raise ValidationError("mu_reg должен быть неотрицательным", code='out_of_range')
    Z, U, Zn = (np.asarray(a, dtype=np.float64) for a in (Z, U, Zn))
    if len(Z) == 0:
        raise ValidationError("Нет данных для идентификации", code='empty')
    n_z = Z.shape[1]

    stacked = np.hstack([Z, U, Zn])
    order = np.lexsort(stacked.T[::-1])
    theta = np.hstack([Z, U])[order]
    target = Zn[order]

    if mu_reg == 0 and np.linalg.matrix_rank(theta) < theta.shape[1]:
        raise ValidationError(
            "Матрица регрессоров вырождена; укажите положительный mu_reg",
            code='rank_deficient',
        )
    penalty = np.diag(np.r_[np.full(n_z, float(mu_reg)), np.zeros(U.shape[1])])
    gram = theta.T @ theta + penalty
    try:
        W = scipy.linalg.solve(gram, theta.T @ target, assume_a='sym')
    except (scipy.linalg.LinAlgError, ValueError):
        raise ValidationError(
            "Нормальные уравнения вырождены; укажите положительный mu_reg",
            code='rank_deficient',
        )
    return W[:n_z].T, W[n_z:].T


@torch.no_grad()
def fit_generator(g, embeddings, solutions):
    """Least-squares fit of the affine generator to per-cluster (A, B) pairs."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    targets_A = np.stack([A.reshape(-1) for A, _ in solutions])
    targets_B = np.stack([B.reshape(-1) for _, B in solutions])

    if g.mode == OperatorGen.MODE_GLOBAL:
        g.gen_A.weight.zero_()
        g.gen_B.weight.zero_()
        g.gen_A.bias.copy_(torch.as_tensor(targets_A.mean(axis=0)))
        g.gen_B.bias.copy_(torch.as_tensor(targets_B.mean(axis=0)))
        return g

    design = np.hstack([embeddings, np.ones((len(embeddings), 1))])
    for layer, targets in ((g.gen_A, targets_A), (g.gen_B, targets_B)):
        coef, *_ = scipy.linalg.lstsq(design, targets)
        layer.weight.copy_(torch.as_tensor(coef[:-1].T.copy()))
        layer.bias.copy_(torch.as_tensor(coef[-1].copy()))
    return g


def identify_from_latents(g, Z, U, Zn, envs, embed, mu_reg, resolution=CLUSTER_RESOLUTION):
    """Per-cluster identification on lifted data, then the generator fit.

    `embed` maps an (C, 2) array of environments to (C, d_e) embeddings.
    Returns the list of per-cluster (A, B) solutions in cluster order.
    """
    Z, U, Zn, envs = (np.asarray(a, dtype=np.float64) for a in (Z, U, Zn, envs))
    if g.mode == OperatorGen.MODE_GLOBAL:
        labels = np.zeros(len(envs), dtype=np.int64)
        _, centers = environment_clusters(envs[:1], resolution)
    else:
        labels, centers = environment_clusters(envs, resolution)

    solutions = []
    for c in range(len(centers)):
        mask = labels == c
        solutions.append(solve_cluster_operators(Z[mask], U[mask], Zn[mask], mu_reg))
        logger.debug("Cluster %d: %d samples around e=%s", c, int(mask.sum()), centers[c])
    fit_generator(g, embed(centers), solutions)
    return solutions


def identify_warmstart(d, enc, mu_reg=1e-3, g=None, resolution=CLUSTER_RESOLUTION):
    """Initializes the operator generator from data lifted by a fixed encoder."""
    if len(d) == 0:
        raise ValidationError("Набор данных пуст", code='empty')
    if g is None:
        g = OperatorGen.for_model(enc)
    x, u, e, x_next = d.tuples()
    with torch.no_grad():
        e_t = to_tensor(e)
        psi = embed_env(enc, e_t)
        Z = enc.encode(to_tensor(x), e_t, psi).numpy()
        # z_{k+1} is lifted with e_k: both sides of the step live on the same fiber.
        Zn = enc.encode(to_tensor(x_next), e_t, psi).numpy()

    def embed(centers):
        return embed_env(enc, centers).numpy()

    solutions = identify_from_latents(g, Z, u, Zn, e, embed, mu_reg, resolution)
    logger.info("Warm start: %d environment cluster(s), mu_reg=%g, mode=%s", len(solutions), mu_reg, g.mode)
    return g


# ---------------------------------------------------------------------------
# Audits and dumps
# ---------------------------------------------------------------------------

@torch.no_grad()
def spectral_norms_on_grid(model, g, grid=None):
    """Dense-SVD spectral norms of A(e) over an environment grid."""
    grid = env_grid() if grid is None else np.asarray(grid)
    A, _ = g(embed_env(model, grid))
    return torch.linalg.matrix_norm(A, ord=2).numpy()


def dump_operators_csv(model, g, e, directory):
    """Writes A(e) and B(e) as CSV matrices with a column header; returns both paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    A, B = operators_for_env(model, g, e)
    paths = []
    for name, matrix in (('A', A.numpy()), ('B', B.numpy())):
        path = directory / f'{name}.csv'
        with path.open('w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow([f'c{j}' for j in range(matrix.shape[1])])
            for row in matrix:
                writer.writerow([format(float(v), '.17g') for v in row])
        paths.append(path)
    return paths
