import json
from pathlib import Path

from django.core.management.base import CommandError

from ...models import Certificate
from ...stability import (
    DEFAULT_QUANTILE, CertificateRefused, TrackingBoundInputs, certify, estimate_dbar, estimate_lipschitz,
    estimate_reconstruction_error, tracking_bound, ultimate_bound, write_certificate,
)
from ...vehicle import env_grid, read_dataset_csv
from ..base import SfkdCommand, artifacts_path


class Command(SfkdCommand):
    help = 'Issue an ISS certificate for a trained checkpoint'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', default=None, help='Dataset CSV for the residual bound (default: <artifacts>/dataset.csv)')
        parser.add_argument('--dt', type=float, default=0.1)
        parser.add_argument('--output', default=None, help='Certificate directory (default: <artifacts>/certificates/<label>)')
        parser.add_argument('--quantile', type=float, default=DEFAULT_QUANTILE)
        parser.add_argument('--grid-points', type=int, default=9, help='Points per axis of the environment grid')
        parser.add_argument('--lipschitz-pairs', type=int, default=100_000)
        parser.add_argument('--eps-mppi', type=float, default=0.0, help='Latent suboptimality of the MPPI planner')

    def run(self, **options):
        model, g, meta = self.load_checkpoint(options['checkpoint'])
        record = self.checkpoint_record(options['checkpoint'], model, meta)
        label = meta.get('label', Path(options['checkpoint']).stem)
        directory = Path(options['output'] or artifacts_path('certificates', label))

        try:
            cert = certify(g, model, env_grid(options['grid_points']))
        except CertificateRefused as exc:
            Certificate.objects.create(
                checkpoint=record,
                alpha=exc.diagnostics.get('alpha'),
                accepted=False,
                diagnostics=json.dumps(exc.diagnostics, ensure_ascii=False),
                directory=str(directory),
            )
            raise CommandError(f"Сертификат отклонён: {exc.messages[0]}")

        dataset = read_dataset_csv(options['dataset'] or artifacts_path('dataset.csv'), options['dt'])
        estimate = estimate_dbar(model, g, dataset, options['quantile'])
        cert = cert.with_dbar(estimate.dbar)

        x, _, e, _ = dataset.tuples()
        lipschitz = estimate_lipschitz(model, x, e, options['lipschitz_pairs'], seed=options['seed'])
        reconstruction = estimate_reconstruction_error(model, x, e)
        tracking = None
        if lipschitz > 0:
            tracking = tracking_bound(cert, TrackingBoundInputs(options['eps_mppi'], lipschitz, reconstruction))
        else:
            self.warning("Оценка константы Липшица равна нулю: граница слежения не вычисляется")

        extra = {
            'QUANTILE': estimate.quantile,
            'TAIL_COUNT': estimate.tail_count,
            'SAMPLE_COUNT': estimate.sample_count,
            'RHO0': estimate.rho0,
            'ETA_MAX': estimate.eta_max,
            'L_PHI': lipschitz,
            'EPS_PHI': reconstruction,
        }
        if tracking is not None:
            extra['TRACKING_BOUND'] = tracking
        write_certificate(cert, directory, extra)

        Certificate.objects.create(
            checkpoint=record,
            alpha=cert.alpha,
            dbar=cert.dbar,
            c1=cert.c1,
            c2=cert.c2,
            ultimate_bound=ultimate_bound(cert),
            tracking_bound=tracking,
            accepted=True,
            diagnostics=json.dumps({'rho0': estimate.rho0, 'eta_max': estimate.eta_max,
                                    'tail_count': estimate.tail_count, 'L_phi': lipschitz, 'eps_phi': reconstruction}),
            directory=str(directory),
        )
        self.stdout.write(f"α = {cert.alpha:.6f}, d̄ = {cert.dbar:.4e}, предельная граница = {ultimate_bound(cert):.4e}")
        self.success(f"Сертификат принят → {directory}")
