"""
Django app configuration for the maskshift module.
"""

from django.apps import AppConfig


class MaskshiftConfig(AppConfig):
    """Configuration class for the maskshift application."""

    default_auto_field = 'django.db.models.BigAutoField'
    name = 'maskshift'
    verbose_name = 'Mask Shift Experiments'
