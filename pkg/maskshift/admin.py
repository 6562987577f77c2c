"""
Django admin configuration for the maskshift app.
"""

from django.contrib import admin

from .models import ExperimentRun, ResultRecord


class ResultRecordInline(admin.TabularInline):
    """Read-only result rows shown on the run page."""

    model = ResultRecord
    extra = 0
    can_delete = False
    readonly_fields = [
        'mode',
        'train_level',
        'test_level',
        'rmse',
        'optimal_rmse',
        'gap',
        'seed',
        'wall_time_ms',
        'in_distribution',
    ]


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    """
    Admin interface configuration for the ExperimentRun model.

    Features:
    - List display with kind and status
    - Filtering by kind and status
    - Result rows inline
    """

    list_display = ['id', 'name', 'kind', 'status', 'created_at', 'finished_at']
    list_filter = ['kind', 'status', 'created_at']
    search_fields = ['name', 'error']
    readonly_fields = ['created_at', 'finished_at']
    ordering = ['-created_at']
    inlines = [ResultRecordInline]

    fieldsets = (
        ('Run', {
            'fields': ('name', 'kind', 'status')
        }),
        ('Configuration', {
            'fields': ('config',)
        }),
        ('Outcome', {
            'fields': ('error', 'created_at', 'finished_at'),
            'classes': ('collapse',)
        }),
    )
