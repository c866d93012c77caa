from django.contrib import admin
from .models import Certificate, Checkpoint, Episode


@admin.register(Checkpoint)
class CheckpointAdmin(admin.ModelAdmin):
    list_display = ['label', 'ablation', 'seed', 'latent_dim', 'beta', 'eps0', 'l_pred', 'created_at']
    list_filter = ['ablation']
    search_fields = ['label', 'path', 'sha256']
    readonly_fields = ['sha256', 'created_at']


@admin.register(Certificate)
class CertificateAdmin(admin.ModelAdmin):
    list_display = ['checkpoint', 'alpha', 'dbar', 'ultimate_bound', 'accepted', 'created_at']
    list_filter = ['accepted']
    readonly_fields = ['created_at']


@admin.register(Episode)
class EpisodeAdmin(admin.ModelAdmin):
    list_display = ['checkpoint', 'scenario', 'seed', 'status', 'rmse', 'smoothness', 'violation_rate']
    list_filter = ['scenario', 'status']
    readonly_fields = ['created_at']
