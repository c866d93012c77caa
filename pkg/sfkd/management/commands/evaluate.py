from pathlib import Path

from ...forms import FULL_SCALE_EPISODES, MppiConfigForm, PathConfigForm
from ...harness import episode_summary, run_episode, write_episode_csv
from ...models import Episode
from ...stability import read_certificate, ultimate_bound
from ..base import SfkdCommand, artifacts_path, method_tag

DEFAULT_EPISODES = 20


class Command(SfkdCommand):
    help = 'Run closed-loop episodes of a checkpoint and write one CSV per episode'
    config_forms = (MppiConfigForm, PathConfigForm)

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--certificate', default=None, help='Certificate directory; its ultimate bound is the violation threshold')
        parser.add_argument('--scenarios', default='S1,S2,S3')
        parser.add_argument('--episodes', type=int, default=None, help=f'Episodes per scenario (default {DEFAULT_EPISODES})')
        parser.add_argument('--duration', type=float, default=None, help='Episode length, s (default: scenario length)')
        parser.add_argument('--output', default=None, help='Episode directory (default: <artifacts>/episodes/<label>)')

    def run(self, **options):
        cfg, path = self.load_configs(options)
        model, g, meta = self.load_checkpoint(options['checkpoint'])
        record = self.checkpoint_record(options['checkpoint'], model, meta)
        method = method_tag(meta)
        label = meta.get('label', Path(options['checkpoint']).stem)

        threshold = 0.0
        if options['certificate']:
            threshold = ultimate_bound(read_certificate(options['certificate']))
        else:
            self.warning("Сертификат не указан: порог нарушений равен нулю")

        episodes = options['episodes']
        if episodes is None:
            episodes = FULL_SCALE_EPISODES if options['full_scale'] else DEFAULT_EPISODES
        output = Path(options['output'] or artifacts_path('episodes', label))
        scenarios = [s.strip() for s in options['scenarios'].split(',') if s.strip()]

        failures = 0
        for scenario in scenarios:
            for seed in range(options['seed'], options['seed'] + episodes):
                log = run_episode(scenario, model, g, cfg, seed, threshold, path, options['duration'],
                                  method=method, checkpoint=label)
                csv_path = write_episode_csv(log, output / scenario / f'episode_{seed}.csv')
                rmse, smoothness, rate = episode_summary(log)
                Episode.objects.create(
                    checkpoint=record,
                    scenario=scenario,
                    seed=seed,
                    csv_path=str(csv_path),
                    status=Episode.STATUS_FAILED if log.failed else Episode.STATUS_OK,
                    rmse=rmse,
                    smoothness=smoothness,
                    violation_rate=rate,
                    row_count=len(log),
                )
                failures += int(log.failed)
            self.stdout.write(f"{method} {scenario}: {episodes} эпизодов")

        if failures:
            self.warning(f"Эпизодов со сбоем контроллера: {failures}")
        self.success(f"Эпизоды записаны в {output}")
