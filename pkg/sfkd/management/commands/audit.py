from pathlib import Path

from django.core.management.base import CommandError

from ...harness import SPECTRAL_TOLERANCE, distortion_audit, gradient_audit, spectral_audit
from ...mppi import lqr_benchmark
from ...stability import (
    certify, estimate_dbar, read_certificate, soundness_audit, write_violation_trace_csv,
)
from ...vehicle import read_dataset_csv
from ..base import SfkdCommand, artifacts_path

CHECKS = ('spectral', 'soundness', 'distortion', 'lqr', 'gradient')
LQR_TOLERANCE = 0.10


class Command(SfkdCommand):
    help = 'Property audits: spectral bound, ISS soundness, transport distortion, MPPI vs LQR, gradients'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', default=None, help='Required by spectral, soundness and distortion')
        parser.add_argument('--certificate', default=None)
        parser.add_argument('--dataset', default=None, help='Used to estimate d̄ when no certificate is given')
        parser.add_argument('--checks', default=','.join(CHECKS))
        parser.add_argument('--rollouts', type=int, default=100)
        parser.add_argument('--steps', type=int, default=200)
        parser.add_argument('--output', default=None, help='Directory for audit CSVs (default: <artifacts>/audit)')

    def run(self, **options):
        checks = [c.strip() for c in options['checks'].split(',') if c.strip()]
        unknown = sorted(set(checks) - set(CHECKS))
        if unknown:
            raise CommandError(f"Неизвестные проверки: {', '.join(unknown)}")
        output = Path(options['output'] or artifacts_path('audit'))

        model = g = None
        if set(checks) & {'spectral', 'soundness', 'distortion'}:
            if not options['checkpoint']:
                raise CommandError("Для проверок spectral, soundness и distortion нужен --checkpoint")
            model, g, _ = self.load_checkpoint(options['checkpoint'])

        failed = []
        for check in checks:
            passed = getattr(self, f'check_{check}')(model, g, options, output)
            if passed is False:
                failed.append(check)
        if failed:
            raise CommandError(f"Аудит не пройден: {', '.join(failed)}")
        self.success("Аудит пройден")

    def report(self, name, passed, detail):
        line = f"[{'OK' if passed else 'FAIL'}] {name}: {detail}"
        self.stdout.write(self.style.SUCCESS(line) if passed else self.style.ERROR(line))
        return passed

    def check_spectral(self, model, g, options, output):
        worst, bound = spectral_audit(model, g)
        return self.report('spectral', worst <= bound + SPECTRAL_TOLERANCE,
                           f"max ||A(e)||₂ = {worst:.8f}, граница {bound:.8f}")

    def check_soundness(self, model, g, options, output):
        if options['certificate']:
            cert = read_certificate(options['certificate'])
        elif options['dataset']:
            cert = certify(g, model)
            cert = cert.with_dbar(estimate_dbar(model, g, read_dataset_csv(options['dataset'])).dbar)
        else:
            self.warning("soundness пропущен: нужен --certificate или --dataset")
            return None
        report = soundness_audit(model, g, cert, options['rollouts'], options['steps'], options['seed'])
        if report.traces:
            write_violation_trace_csv(output / 'soundness_trace.csv', *report.traces[0])
        return self.report(
            'soundness', report.passed,
            f"{report.violations} нарушений на {report.conforming_steps} шагах "
            f"(исключено {report.excluded_steps}, по реализованной границе {report.realized_violations})",
        )

    def check_distortion(self, model, g, options, output):
        low, median, high = distortion_audit(model, seed=options['seed'])
        self.stdout.write(f"[INFO] distortion: min {low:.4f}, медиана {median:.4f}, max {high:.4f}")
        return None

    def check_lqr(self, model, g, options, output):
        mppi_cost, lqr_cost = lqr_benchmark()
        gap = mppi_cost / lqr_cost - 1.0
        return self.report('lqr', gap <= LQR_TOLERANCE,
                           f"MPPI {mppi_cost:.6f}, LQR {lqr_cost:.6f}, превышение {100 * gap:.2f}%")

    def check_gradient(self, model, g, options, output):
        results = gradient_audit(seed=options['seed'])
        worst = max(results, key=lambda item: item[0] / item[1])
        return self.report('gradient', all(error <= tol for error, tol in results),
                           f"наибольшая относительная ошибка {worst[0]:.3e} (допуск {worst[1]:.0e})")
