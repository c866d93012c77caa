from django.urls import path
from . import views

urlpatterns = [
    # Episodes
    path('episodes/export/', views.EpisodeExportCSVView.as_view(), name='episode_export'),
    path('episodes/<int:pk>/csv/', views.EpisodeCSVView.as_view(), name='episode_csv'),

    # Certificates
    path('certificates/<int:pk>/grid/', views.CertificateGridCSVView.as_view(), name='certificate_grid'),
]
