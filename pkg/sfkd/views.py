import csv
from pathlib import Path

from django.contrib.auth.mixins import LoginRequiredMixin
from django.http import FileResponse, Http404, HttpResponse
from django.shortcuts import get_object_or_404
from django.views import View

from .models import Certificate, Episode


def _file_response(path, filename):
    path = Path(path)
    if not path.is_file():
        raise Http404(f"Файл не найден: {path.name}")
    return FileResponse(path.open('rb'), as_attachment=True, filename=filename, content_type='text/csv')


class EpisodeExportCSVView(LoginRequiredMixin, View):
    """Export registered episodes as CSV (semicolon-separated, UTF-8 BOM for Excel)."""

    def get(self, request):
        queryset = Episode.objects.select_related('checkpoint')

        scenario_filter = request.GET.get('scenario')
        if scenario_filter:
            queryset = queryset.filter(scenario=scenario_filter)

        status_filter = request.GET.get('status')
        if status_filter:
            queryset = queryset.filter(status=status_filter)

        ablation_filter = request.GET.get('ablation')
        if ablation_filter:
            queryset = queryset.filter(checkpoint__ablation=ablation_filter)

        response = HttpResponse(content_type='text/csv; charset=utf-8')
        response['Content-Disposition'] = 'attachment; filename="episodes_export.csv"'
        response.write('\ufeff')  # UTF-8 BOM so Excel opens correctly

        writer = csv.writer(response, delimiter=';')
        writer.writerow([
            '#', 'Метод', 'Контрольная точка', 'Сценарий', 'Seed', 'Статус',
            'RMSE, м', 'Плавность, рад/с', 'Доля нарушений', 'Строк', 'Создан',
        ])

        status_map = dict(Episode.STATUS_CHOICES)
        for episode in queryset:
            writer.writerow([
                episode.pk,
                episode.checkpoint.method_tag,
                episode.checkpoint.label,
                episode.scenario,
                episode.seed,
                status_map.get(episode.status, episode.status),
                format(episode.rmse, '.17g'),
                format(episode.smoothness, '.17g'),
                format(episode.violation_rate, '.17g'),
                episode.row_count,
                episode.created_at.strftime('%d.%m.%Y %H:%M') if episode.created_at else '',
            ])

        return response


class EpisodeCSVView(LoginRequiredMixin, View):
    """Download the per-step CSV of one episode."""

    def get(self, request, pk):
        episode = get_object_or_404(Episode, pk=pk)
        return _file_response(episode.csv_path, f'episode_{episode.scenario}_{episode.seed}.csv')


class CertificateGridCSVView(LoginRequiredMixin, View):
    def get(self, request, pk):
        certificate = get_object_or_404(Certificate, pk=pk)
        return _file_response(Path(certificate.directory) / 'certificate_grid.csv', f'certificate_{pk}_grid.csv')
