from pathlib import Path

from ...koopman import dump_operators_csv
from ...vehicle import EnvInput
from ..base import SfkdCommand, artifacts_path


class Command(SfkdCommand):
    help = 'Write A(e) and B(e) of a checkpoint as CSV matrices'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--mu', type=float, default=0.6)
        parser.add_argument('--w', type=float, default=0.0)
        parser.add_argument('--output', default=None, help='Directory (default: <artifacts>/operators/<label>)')

    def run(self, **options):
        model, g, meta = self.load_checkpoint(options['checkpoint'])
        label = meta.get('label', Path(options['checkpoint']).stem)
        e = EnvInput(options['mu'], options['w'])
        e.validate()
        directory = options['output'] or artifacts_path('operators', label)
        a_path, b_path = dump_operators_csv(model, g, e, directory)
        self.success(f"A(e), B(e) при mu={e.mu}, w={e.w} → {a_path}, {b_path}")
