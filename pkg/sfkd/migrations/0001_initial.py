import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='Checkpoint',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('label', models.CharField(max_length=200, verbose_name='Метка')),
                ('ablation', models.CharField(
                    choices=[('full', 'SFKD'), ('no_fiber', 'SFKD−Fiber'), ('no_contr', 'SFKD−Contr')],
                    default='full', max_length=20, verbose_name='Абляция')),
                ('seed', models.IntegerField(default=0, verbose_name='Seed')),
                ('path', models.CharField(max_length=500, verbose_name='Файл')),
                ('sha256', models.CharField(max_length=64, verbose_name='SHA-256')),
                ('beta', models.FloatField(verbose_name='β')),
                ('eps0', models.FloatField(verbose_name='ε₀')),
                ('latent_dim', models.PositiveIntegerField(verbose_name='Размерность латентного пространства')),
                ('l_pred', models.FloatField(blank=True, null=True, verbose_name='L_pred')),
                ('l_contr', models.FloatField(blank=True, null=True, verbose_name='L_contr')),
                ('l_recon', models.FloatField(blank=True, null=True, verbose_name='L_recon')),
                ('train_seconds', models.FloatField(default=0.0, verbose_name='Время обучения, с')),
                ('created_at', models.DateTimeField(auto_now_add=True, verbose_name='Создана')),
            ],
            options={
                'verbose_name': 'Контрольная точка',
                'verbose_name_plural': 'Контрольные точки',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='Certificate',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('alpha', models.FloatField(blank=True, null=True, verbose_name='α')),
                ('dbar', models.FloatField(default=0.0, verbose_name='d̄')),
                ('c1', models.FloatField(default=1.0, verbose_name='c1')),
                ('c2', models.FloatField(default=1.0, verbose_name='c2')),
                ('ultimate_bound', models.FloatField(blank=True, null=True, verbose_name='Предельная граница')),
                ('tracking_bound', models.FloatField(blank=True, null=True, verbose_name='Граница слежения')),
                ('accepted', models.BooleanField(default=False, verbose_name='Принят')),
                ('diagnostics', models.TextField(blank=True, verbose_name='Диагностика')),
                ('directory', models.CharField(blank=True, max_length=500, verbose_name='Каталог файлов')),
                ('created_at', models.DateTimeField(auto_now_add=True, verbose_name='Создан')),
                ('checkpoint', models.ForeignKey(
                    on_delete=django.db.models.deletion.CASCADE, related_name='certificates',
                    to='sfkd.checkpoint', verbose_name='Контрольная точка')),
            ],
            options={
                'verbose_name': 'ISS-сертификат',
                'verbose_name_plural': 'ISS-сертификаты',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='Episode',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('scenario', models.CharField(
                    choices=[('S1', 'S1: постоянная среда'), ('S2', 'S2: падение сцепления'),
                             ('S3', 'S3: переключение сред')],
                    max_length=2, verbose_name='Сценарий')),
                ('seed', models.IntegerField(verbose_name='Seed')),
                ('csv_path', models.CharField(max_length=500, verbose_name='CSV-файл')),
                ('status', models.CharField(
                    choices=[('ok', 'Успешно'), ('failed', 'Сбой контроллера')],
                    default='ok', max_length=10, verbose_name='Статус')),
                ('rmse', models.FloatField(verbose_name='RMSE, м')),
                ('smoothness', models.FloatField(verbose_name='Плавность, рад/с')),
                ('violation_rate', models.FloatField(verbose_name='Доля нарушений')),
                ('row_count', models.PositiveIntegerField(verbose_name='Строк')),
                ('created_at', models.DateTimeField(auto_now_add=True, verbose_name='Создан')),
                ('checkpoint', models.ForeignKey(
                    on_delete=django.db.models.deletion.CASCADE, related_name='episodes',
                    to='sfkd.checkpoint', verbose_name='Контрольная точка')),
            ],
            options={
                'verbose_name': 'Эпизод',
                'verbose_name_plural': 'Эпизоды',
                'ordering': ['scenario', 'seed'],
            },
        ),
    ]
