"""Joint training of the SFKD model under prediction, contraction and reconstruction losses."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from django.core.exceptions import ValidationError

from .checkpoints import save_checkpoint
from .koopman import identify_warmstart, latent_step, spectral_norms_on_grid
from .networks import ModelConfig, SfkdModel, residual_jacobians, to_tensor, top_singular_vectors, wrap_angle
from .vehicle import env_grid

logger = logging.getLogger(__name__)

ABLATION_FULL = 'full'
ABLATION_NO_FIBER = 'no_fiber'
ABLATION_NO_CONTR = 'no_contr'
ABLATION_CHOICES = [
    (ABLATION_FULL, 'SFKD'),
    (ABLATION_NO_FIBER, 'SFKD−Fiber'),
    (ABLATION_NO_CONTR, 'SFKD−Contr'),
]
METHOD_TAGS = dict(ABLATION_CHOICES)

# Divergence guard: abort once the batch loss exceeds this multiple of the first one.
DIVERGENCE_FACTOR = 1e6

AUDIT_POINTS = 64


@dataclass(frozen=True)
class TrainConfig:
    lambda_c: float = 10.0
    lambda_r: float = 1.0
    mu_reg: float = 1e-3
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 256
    contraction_sample_count: int = 16
    ablation: str = ABLATION_FULL
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.ablation not in METHOD_TAGS:
            raise ValidationError(f"Неизвестная абляция: {self.ablation}", code='invalid_choice')
        if min(self.lambda_c, self.lambda_r, self.mu_reg, self.learning_rate) < 0:
            raise ValidationError("Веса и шаг обучения должны быть неотрицательными", code='out_of_range')
        if self.epochs < 1 or self.batch_size < 1 or self.contraction_sample_count < 1:
            raise ValidationError("epochs, batch_size и contraction_sample_count должны быть положительными",
                                  code='out_of_range')
        if self.ablation == ABLATION_NO_CONTR:
            object.__setattr__(self, 'lambda_c', 0.0)

    @property
    def conditioned(self):
        return self.ablation != ABLATION_NO_FIBER


class Batch(NamedTuple):
    x: torch.Tensor
    u: torch.Tensor
    e: torch.Tensor
    x_next: torch.Tensor

    @classmethod
    def from_arrays(cls, x, u, e, x_next):
        return cls(to_tensor(x), to_tensor(u), to_tensor(e), to_tensor(x_next))

    def take(self, index):
        return Batch(*(t[index] for t in self))


@dataclass
class EpochRecord:
    epoch: int
    l_pred: float
    l_contr: float
    l_recon: float
    max_specnorm_A: float
    max_jac_norm: float
    seconds: float


TRAIN_LOG_COLUMNS = ['epoch', 'l_pred', 'l_contr', 'l_recon', 'max_specnorm_A', 'max_jac_norm', 'seconds']


@dataclass
class TrainLog:
    config: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("Epoch index must increase")
        self.records.append(record)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(TRAIN_LOG_COLUMNS)
            for record in self.records:
                writer.writerow([record.epoch] + [format(getattr(record, name), '.17g') for name in TRAIN_LOG_COLUMNS[1:]])
        return path


class TrainingAborted(RuntimeError):
    """Training stopped on divergence or a non-finite loss; carries the partial log."""

    def __init__(self, message, log, component=None):
        super().__init__(message)
        self.log = log
        self.component = component


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def contraction_penalty(m, z, u, psi, beta, max_iter=500):
    """Sum over points of max(0, ||dr/dz||_2 - beta)^2.

    The singular pair (left, right) is found on explicit Jacobians and held
    fixed; sigma = left^T J right is then differentiated through a
    double-backward of the residual with respect to z.
    """
    if len(z) == 0:
        return torch.zeros((), dtype=z.dtype)
    with torch.no_grad():
        jacobians = residual_jacobians(m, z.detach(), u.detach(), psi.detach())
        left, right, _, _ = top_singular_vectors(jacobians, max_iter=max_iter)
    if not z.requires_grad:
        z = z.detach().requires_grad_()
    out = m.residual_fn(z, u, psi)
    (jt_left,) = torch.autograd.grad((out * left).sum(), z, create_graph=True)
    sigma = (jt_left * right).sum(dim=-1)
    return (torch.relu(sigma - beta) ** 2).sum()


def total_loss(m, g, batch, cfg=TrainConfig(), contraction_idx=None, weights=None):
    """Composite loss over a batch of chained tuples.

    Returns (total, parts) where parts holds the unweighted components
    'pred', 'contr' and 'recon' as tensors. `weights` overrides the
    (pred, contr, recon) multipliers taken from cfg; contraction_idx picks the
    batch rows where the Jacobian penalty is evaluated (all rows when None).
    """
    w_pred, w_contr, w_recon = weights if weights is not None else (1.0, cfg.lambda_c, cfg.lambda_r)
    psi = m.embed(batch.e)
    z = m.encode(batch.x, batch.e, psi)
    z_next = m.encode(batch.x_next, batch.e, psi)

    prediction_error = z_next - latent_step(m, g, z, batch.u, psi)
    l_pred = (prediction_error ** 2).sum()

    diff = batch.x - m.decode(z)
    diff = torch.cat([diff[..., :2], wrap_angle(diff[..., 2:3]), diff[..., 3:]], dim=-1)
    l_recon = (diff ** 2).sum()

    if w_contr > 0:
        index = slice(None) if contraction_idx is None else torch.as_tensor(contraction_idx)
        l_contr = contraction_penalty(m, z[index], batch.u[index], psi[index], m.beta)
    else:
        l_contr = torch.zeros((), dtype=l_pred.dtype)

    total = w_pred * l_pred + w_contr * l_contr + w_recon * l_recon
    return total, {'pred': l_pred, 'contr': l_contr, 'recon': l_recon}


def _check_finite_parts(parts, log):
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise TrainingAborted(f"Нечисловое значение компоненты потерь '{name}'", log, component=name)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_model(d, cfg, model_config=ModelConfig()):
    model_config = replace(model_config, conditioned=cfg.conditioned, seed=cfg.seed)
    model = SfkdModel(model_config)
    x, _, _, _ = d.tuples()
    model.fit_normalizer(x)
    return model


@torch.no_grad()
def max_jacobian_norm(m, batch):
    psi = m.embed(batch.e)
    z = m.encode(batch.x, batch.e, psi)
    jacobians = residual_jacobians(m, z, batch.u, psi)
    return float(torch.linalg.matrix_norm(jacobians, ord=2).max())


def train(d, cfg=TrainConfig(), model_config=ModelConfig(), checkpoint_dir=None):
    """Warm start followed by minibatch SGD with momentum and cosine-decayed step.

    Returns (model, operator generator, TrainLog); bit-identical for a fixed seed.
    """
    if len(d) == 0:
        raise ValidationError("Набор данных пуст", code='empty')
    torch.manual_seed(cfg.seed)
    model = build_model(d, cfg, model_config)
    g = identify_warmstart(d, model, cfg.mu_reg)

    data = Batch.from_arrays(*d.tuples())
    n = len(data.x)
    rng = np.random.default_rng(cfg.seed)
    audit_batch = data.take(torch.as_tensor(np.sort(rng.choice(n, size=min(AUDIT_POINTS, n), replace=False))))
    grid = env_grid()

    optimizer = torch.optim.SGD(
        list(model.parameters()) + list(g.parameters()),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    log = TrainLog(config=asdict(cfg))
    reference_loss = None

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        sums = {'pred': 0.0, 'contr': 0.0, 'recon': 0.0}
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            index = order[start:start + cfg.batch_size]
            batch = data.take(torch.as_tensor(index))
            contraction_idx = None
            if cfg.lambda_c > 0:
                contraction_idx = rng.choice(len(index), size=min(cfg.contraction_sample_count, len(index)),
                                             replace=False)

            optimizer.zero_grad()
            total, parts = total_loss(model, g, batch, cfg, contraction_idx)
            _check_finite_parts(parts, log)
            mean_loss = float(total) / len(index)
            if reference_loss is None:
                reference_loss = max(mean_loss, 1e-300)
            elif mean_loss > DIVERGENCE_FACTOR * reference_loss:
                worst = max(parts, key=lambda name: float(parts[name]))
                raise TrainingAborted(
                    f"Расхождение обучения на эпохе {epoch}: потери {mean_loss:.3e} "
                    f"(начальные {reference_loss:.3e}), компонента '{worst}'",
                    log,
                    component=worst,
                )
            (total / len(index)).backward()
            optimizer.step()
            for name, value in parts.items():
                sums[name] += float(value)
        scheduler.step()

        record = EpochRecord(
            epoch=epoch,
            l_pred=sums['pred'] / n,
            l_contr=sums['contr'] / n,
            l_recon=sums['recon'] / n,
            max_specnorm_A=float(spectral_norms_on_grid(model, g, grid).max()),
            max_jac_norm=max_jacobian_norm(model, audit_batch),
            seconds=time.perf_counter() - started,
        )
        log.append(record)
        logger.info(
            "epoch %d: pred=%.4e contr=%.4e recon=%.4e max|A|=%.4f max|J|=%.4f (%.1fs)",
            record.epoch, record.l_pred, record.l_contr, record.l_recon,
            record.max_specnorm_A, record.max_jac_norm, record.seconds,
        )
        if checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f'epoch_{epoch:04d}.pt', model, g, {'epoch': epoch})

    model.eval()
    g.eval()
    return model, g, log


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def gradient_check(m, g, batch, step=1e-5, cfg=TrainConfig(), contraction_idx=None, weights=None,
                   max_entries_per_tensor=None, seed=0, floor=1e-8):
    """Worst relative error between autograd and central finite differences.

    The denominator is max(|analytic|, |numeric|, floor). With
    max_entries_per_tensor set, that many entries per parameter tensor are
    sampled instead of checking every one.
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValidationError("Шаг конечных разностей должен лежать в [1e-6, 1e-4]", code='out_of_range')
    params = [p for p in list(m.parameters()) + list(g.parameters()) if p.requires_grad]
    total, _ = total_loss(m, g, batch, cfg, contraction_idx, weights)
    grads = torch.autograd.grad(total, params, allow_unused=True)

    def loss_value():
        return float(total_loss(m, g, batch, cfg, contraction_idx, weights)[0])

    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(params, grads):
        flat = param.data.view(-1)
        analytic_flat = grad.reshape(-1) if grad is not None else torch.zeros_like(flat)
        entries = np.arange(flat.numel())
        if max_entries_per_tensor is not None and flat.numel() > max_entries_per_tensor:
            entries = rng.choice(flat.numel(), size=max_entries_per_tensor, replace=False)
        for i in entries:
            original = float(flat[i])
            flat[i] = original + step
            plus = loss_value()
            flat[i] = original - step
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(analytic_flat[i])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, error)
    return worst
