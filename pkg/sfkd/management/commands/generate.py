from ...forms import DatasetConfigForm, VehicleConfigForm
from ...vehicle import generate_dataset, write_dataset_csv
from ..base import SfkdCommand, artifacts_path


class Command(SfkdCommand):
    help = 'Generate a (x, u, e, x_next) dataset from the bicycle simulator'
    config_forms = (DatasetConfigForm, VehicleConfigForm)

    def add_command_arguments(self, parser):
        parser.add_argument('--output', default=None, help='Dataset CSV (default: <artifacts>/dataset.csv)')
        parser.add_argument('--segments', type=int, default=None)
        parser.add_argument('--scenarios', default=None, help='Comma-separated: S1,S2,S3,random')

    def run(self, **options):
        overrides = {}
        if options['segments'] is not None:
            overrides['segments'] = options['segments']
        if options['scenarios']:
            overrides['scenarios'] = options['scenarios']
        dataset_cfg, vehicle = self.load_configs(options, overrides)

        dataset = generate_dataset(dataset_cfg, options['seed'], vehicle)
        output = options['output'] or artifacts_path('dataset.csv')
        write_dataset_csv(dataset, output)
        self.success(f"Набор данных: {len(dataset)} переходов, {dataset.n_segments} сегментов → {output}")
