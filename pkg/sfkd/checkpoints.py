"""Self-describing model checkpoints (torch.save of plain containers and tensors)."""

import hashlib
import logging
from dataclasses import asdict
from pathlib import Path

import torch
from django.core.exceptions import ValidationError

from .koopman import OperatorGen
from .networks import ModelConfig, SfkdModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'sfkd-checkpoint/1'


def save_checkpoint(path, model, g, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format': CHECKPOINT_FORMAT,
        'model_config': asdict(model.config),
        'operator_config': g.describe(),
        'model_state': model.state_dict(),
        'operator_state': g.state_dict(),
        'meta': dict(meta or {}),
    }
    torch.save(payload, path)
    logger.info("Checkpoint written to %s", path)
    return path


def load_checkpoint(path):
    """Returns (model, operator generator, meta) restored from a checkpoint file."""
    try:
        payload = torch.load(Path(path), weights_only=True)
    except FileNotFoundError:
        raise ValidationError(f"Файл контрольной точки не найден: {path}", code='not_found')
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise ValidationError(f"Неизвестный формат контрольной точки: {path}", code='invalid_format')

    config = payload['model_config']
    for key in ('psi_hidden', 'encoder_hidden', 'residual_hidden'):
        config[key] = tuple(config[key])
    model = SfkdModel(ModelConfig(**config))
    model.load_state_dict(payload['model_state'])
    g = OperatorGen(**payload['operator_config'])
    g.load_state_dict(payload['operator_state'])
    model.eval()
    g.eval()
    return model, g, payload['meta']


def file_sha256(path):
    digest = hashlib.sha256()
    with Path(path).open('rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
