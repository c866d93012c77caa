from django.apps import AppConfig
from django.conf import settings


class SfkdConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "sfkd"
    verbose_name = "SFKD эксперименты"

    def ready(self):
        import torch

        # Fixed thread count and deterministic kernels keep checkpoints bit-identical.
        torch.set_num_threads(settings.SFKD_TORCH_THREADS)
        torch.use_deterministic_algorithms(True)
