from pathlib import Path

from ...harness import sweep_dbar, write_table_csv
from ...stability import certify, read_certificate
from ..base import SfkdCommand, artifacts_path

DEFAULT_DBAR = '0.005,0.01,0.02,0.05,0.1,0.2'


class Command(SfkdCommand):
    help = 'Violation rate against the ultimate bound as a function of injected disturbance magnitude'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--certificate', default=None, help='Certificate directory (default: certify on the fly)')
        parser.add_argument('--dbar', default=DEFAULT_DBAR, help='Comma-separated disturbance magnitudes')
        parser.add_argument('--rollouts', type=int, default=20)
        parser.add_argument('--steps', type=int, default=100)
        parser.add_argument('--output', default=None, help='CSV (default: <artifacts>/sweep_dbar_<label>.csv)')

    def run(self, **options):
        model, g, meta = self.load_checkpoint(options['checkpoint'])
        label = meta.get('label', Path(options['checkpoint']).stem)
        if options['certificate']:
            cert = read_certificate(options['certificate'])
        else:
            cert = certify(g, model)
        values = [float(v) for v in options['dbar'].split(',') if v.strip()]

        rows = sweep_dbar(model, g, cert, values, options['rollouts'], options['steps'], options['seed'])
        output = write_table_csv(
            options['output'] or artifacts_path(f'sweep_dbar_{label}.csv'),
            ['dbar', 'violation_rate', 'iss_bound'],
            rows,
        )
        worst = max(rate for _, rate, _ in rows)
        self.stdout.write(f"Наибольшая доля нарушений: {worst:.4f}")
        self.success(f"Зависимость от d̄ ({len(rows)} точек) → {output}")
