from django.db import models

from .training import ABLATION_CHOICES, ABLATION_FULL, METHOD_TAGS


class Checkpoint(models.Model):
    ABLATION_CHOICES = ABLATION_CHOICES

    label = models.CharField(max_length=200, verbose_name='Метка')
    ablation = models.CharField(
        max_length=20,
        choices=ABLATION_CHOICES,
        default=ABLATION_FULL,
        verbose_name='Абляция'
    )
    seed = models.IntegerField(default=0, verbose_name='Seed')
    path = models.CharField(max_length=500, verbose_name='Файл')
    sha256 = models.CharField(max_length=64, verbose_name='SHA-256')
    beta = models.FloatField(verbose_name='β')
    eps0 = models.FloatField(verbose_name='ε₀')
    latent_dim = models.PositiveIntegerField(verbose_name='Размерность латентного пространства')
    l_pred = models.FloatField(null=True, blank=True, verbose_name='L_pred')
    l_contr = models.FloatField(null=True, blank=True, verbose_name='L_contr')
    l_recon = models.FloatField(null=True, blank=True, verbose_name='L_recon')
    train_seconds = models.FloatField(default=0.0, verbose_name='Время обучения, с')
    created_at = models.DateTimeField(auto_now_add=True, verbose_name='Создана')

    class Meta:
        verbose_name = 'Контрольная точка'
        verbose_name_plural = 'Контрольные точки'
        ordering = ['-created_at']

    @property
    def method_tag(self):
        return METHOD_TAGS.get(self.ablation, self.ablation)

    def __str__(self):
        return f"{self.label} ({self.method_tag}, seed={self.seed})"


class Certificate(models.Model):
    checkpoint = models.ForeignKey(
        Checkpoint,
        on_delete=models.CASCADE,
        related_name='certificates',
        verbose_name='Контрольная точка'
    )
    alpha = models.FloatField(null=True, blank=True, verbose_name='α')
    dbar = models.FloatField(default=0.0, verbose_name='d̄')
    c1 = models.FloatField(default=1.0, verbose_name='c1')
    c2 = models.FloatField(default=1.0, verbose_name='c2')
    ultimate_bound = models.FloatField(null=True, blank=True, verbose_name='Предельная граница')
    tracking_bound = models.FloatField(null=True, blank=True, verbose_name='Граница слежения')
    accepted = models.BooleanField(default=False, verbose_name='Принят')
    diagnostics = models.TextField(blank=True, verbose_name='Диагностика')
    directory = models.CharField(max_length=500, blank=True, verbose_name='Каталог файлов')
    created_at = models.DateTimeField(auto_now_add=True, verbose_name='Создан')

    class Meta:
        verbose_name = 'ISS-сертификат'
        verbose_name_plural = 'ISS-сертификаты'
        ordering = ['-created_at']

    def __str__(self):
        verdict = 'принят' if self.accepted else 'отклонён'
        return f"Сертификат #{self.pk} для {self.checkpoint.label}: {verdict}"


class Episode(models.Model):
    STATUS_OK = 'ok'
    STATUS_FAILED = 'failed'

    STATUS_CHOICES = [
        (STATUS_OK, 'Успешно'),
        (STATUS_FAILED, 'Сбой контроллера'),
    ]

    SCENARIO_CHOICES = [
        ('S1', 'S1: постоянная среда'),
        ('S2', 'S2: падение сцепления'),
        ('S3', 'S3: переключение сред'),
    ]

    checkpoint = models.ForeignKey(
        Checkpoint,
        on_delete=models.CASCADE,
        related_name='episodes',
        verbose_name='Контрольная точка'
    )
    scenario = models.CharField(max_length=2, choices=SCENARIO_CHOICES, verbose_name='Сценарий')
    seed = models.IntegerField(verbose_name='Seed')
    csv_path = models.CharField(max_length=500, verbose_name='CSV-файл')
    status = models.CharField(
        max_length=10,
        choices=STATUS_CHOICES,
        default=STATUS_OK,
        verbose_name='Статус'
    )
    rmse = models.FloatField(verbose_name='RMSE, м')
    smoothness = models.FloatField(verbose_name='Плавность, рад/с')
    violation_rate = models.FloatField(verbose_name='Доля нарушений')
    row_count = models.PositiveIntegerField(verbose_name='Строк')
    created_at = models.DateTimeField(auto_now_add=True, verbose_name='Создан')

    class Meta:
        verbose_name = 'Эпизод'
        verbose_name_plural = 'Эпизоды'
        ordering = ['scenario', 'seed']

    def __str__(self):
        return f"{self.checkpoint.method_tag} {self.scenario} seed={self.seed}"
