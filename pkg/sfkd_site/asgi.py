"""
ASGI config for sfkd_site project.

Serves the registry admin and the CSV exports; experiments run through
manage.py commands, not through requests.
"""

import os

from django.core.asgi import get_asgi_application

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "sfkd_site.settings")

application = get_asgi_application()
