from collections import defaultdict
from pathlib import Path

from django.core.management.base import CommandError

from ...harness import compute_metrics, read_episode_csv, write_metrics_csv
from ..base import SfkdCommand, artifacts_path


class Command(SfkdCommand):
    help = 'Aggregate episode CSVs into one metrics row per (method, scenario)'

    def add_command_arguments(self, parser):
        parser.add_argument('inputs', nargs='*', help='Episode directories or files (default: <artifacts>/episodes)')
        parser.add_argument('--output', default=None, help='Metrics CSV (default: <artifacts>/metrics.csv)')
        parser.add_argument('--delta-max', type=float, default=None, help='Violation threshold (default: from the episode CSVs)')

    def run(self, **options):
        files = []
        for item in options['inputs'] or [artifacts_path('episodes')]:
            item = Path(item)
            files.extend(sorted(item.rglob('episode_*.csv')) if item.is_dir() else [item])
        if not files:
            raise CommandError("CSV-файлы эпизодов не найдены")

        groups = defaultdict(list)
        for path in files:
            log = read_episode_csv(path)
            groups[(log.method, log.scenario)].append(log)

        rows = [compute_metrics(groups[key], options['delta_max']) for key in sorted(groups)]
        output = write_metrics_csv(options['output'] or artifacts_path('metrics.csv'), rows)
        for row in rows:
            self.stdout.write(
                f"{row.method:12s} {row.scenario}: RMSE {row.rmse_mean:.4f} ± {row.rmse_std:.4f} м, "
                f"плавность {row.smoothness:.4f}, нарушения {row.violation_rate:.3f}, сбоев {row.failures}"
            )
        self.success(f"Метрики ({len(files)} эпизодов) → {output}")
