import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from ..checkpoints import file_sha256, load_checkpoint
from ..forms import FULL_SCALE, load_config
from ..models import Checkpoint
from ..training import ABLATION_FULL, METHOD_TAGS, TrainingAborted

logger = logging.getLogger(__name__)


def artifacts_path(*parts):
    return Path(settings.SFKD_ARTIFACTS_DIR).joinpath(*parts)


def method_tag(meta):
    return METHOD_TAGS.get(meta.get('ablation', ABLATION_FULL), 'SFKD')


class SfkdCommand(BaseCommand):
    """Common --seed/--config/--full-scale handling and error translation."""

    config_forms = ()

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0, help='Seed for every random stream of the run')
        parser.add_argument('--config', default=None, help='key=value config file')
        parser.add_argument('--full-scale', action='store_true', help='Full-size runs: 8000 segments, 200 episodes, M=1500')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except TrainingAborted as exc:
            raise CommandError(f"Обучение прервано: {exc}")
        except ValidationError as exc:
            raise CommandError('; '.join(exc.messages))

    def run(self, **options):
        raise NotImplementedError

    def load_configs(self, options, overrides=None):
        """Config dataclasses for `config_forms`: file values, then --full-scale, then explicit overrides."""
        known = set()
        for form_class in self.config_forms:
            known.update(form_class.base_fields)
        data = {}
        if options.get('full_scale'):
            data.update({key: value for key, value in FULL_SCALE.items() if key in known})
        data.update(overrides or {})
        return load_config(options.get('config'), *self.config_forms, overrides=data)

    def load_checkpoint(self, path):
        model, g, meta = load_checkpoint(path)
        self.stdout.write(f"Контрольная точка: {path} ({meta.get('label', '?')})")
        return model, g, meta

    def checkpoint_record(self, path, model, meta):
        """Registry row for a checkpoint file, matched by content hash and created if missing."""
        sha256 = file_sha256(path)
        record = Checkpoint.objects.filter(sha256=sha256).first()
        if record is None:
            record = Checkpoint.objects.create(
                label=meta.get('label', Path(path).stem),
                ablation=meta.get('ablation', ABLATION_FULL),
                seed=meta.get('seed', 0),
                path=str(path),
                sha256=sha256,
                beta=model.beta,
                eps0=model.eps0,
                latent_dim=model.latent_dim,
                l_pred=meta.get('l_pred'),
                l_contr=meta.get('l_contr'),
                l_recon=meta.get('l_recon'),
            )
        return record

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    def warning(self, message):
        self.stdout.write(self.style.WARNING(message))
