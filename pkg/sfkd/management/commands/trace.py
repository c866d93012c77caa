from ...forms import MppiConfigForm, PathConfigForm
from ...harness import run_episode, switch_recovery, trace_table, write_table_csv
from ..base import SfkdCommand, artifacts_path, method_tag


class Command(SfkdCommand):
    help = 'Lateral deviation over time for one scenario and several checkpoints'
    config_forms = (MppiConfigForm, PathConfigForm)

    def add_command_arguments(self, parser):
        parser.add_argument('checkpoints', nargs='+')
        parser.add_argument('--scenario', default='S3')
        parser.add_argument('--duration', type=float, default=None)
        parser.add_argument('--output', default=None, help='CSV (default: <artifacts>/trace_<scenario>.csv)')

    def run(self, **options):
        cfg, path = self.load_configs(options)
        logs = {}
        for checkpoint in options['checkpoints']:
            model, g, meta = self.load_checkpoint(checkpoint)
            method = method_tag(meta)
            if method in logs:
                method = f"{method}_{meta.get('label', len(logs))}"
            logs[method] = run_episode(options['scenario'], model, g, cfg, options['seed'], path=path,
                                       duration=options['duration'], method=method, checkpoint=checkpoint)
            recovered, total = switch_recovery(logs[method])
            if total:
                self.stdout.write(f"{method}: восстановление после {recovered} из {total} переключений")

        columns, data = trace_table(logs)
        output = write_table_csv(options['output'] or artifacts_path(f"trace_{options['scenario']}.csv"), columns, data)
        self.success(f"Трасса {options['scenario']} → {output}")
