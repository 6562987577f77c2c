"""
Data models for the MaskShift experiment service.

This module defines ExperimentRun, one invocation of the experiment harness
with its configuration and lifecycle status, and ResultRecord, one row of the
result table a run produced.
"""

import math

from django.core.exceptions import ValidationError
from django.db import models, transaction
from django.utils import timezone

from .harness import ResultRow, ResultTable
from .validators import validate_missing_level


class ExperimentRun(models.Model):
    """
    Represents one experiment or ablation run.

    Attributes:
        name (str): Optional label for the run
        kind (str): 'experiment' (configured mode only) or 'ablation' (all four modes)
        status (str): 'pending', 'running', 'completed' or 'failed'
        config (dict): The validated experiment configuration
        error (str): Failure message for failed runs
        created_at (datetime): Timestamp when the run was created
        finished_at (datetime): Timestamp when the run completed or failed

    Business Rules:
        - completed and failed runs carry finished_at
        - failed runs carry an error message
    """

    KIND_EXPERIMENT = 'experiment'
    KIND_ABLATION = 'ablation'

    KIND_CHOICES = [
        (KIND_EXPERIMENT, 'Experiment'),
        (KIND_ABLATION, 'Ablation'),
    ]

    STATUS_PENDING = 'pending'
    STATUS_RUNNING = 'running'
    STATUS_COMPLETED = 'completed'
    STATUS_FAILED = 'failed'

    STATUS_CHOICES = [
        (STATUS_PENDING, 'Pending'),
        (STATUS_RUNNING, 'Running'),
        (STATUS_COMPLETED, 'Completed'),
        (STATUS_FAILED, 'Failed'),
    ]

    FINISHED_STATUSES = (STATUS_COMPLETED, STATUS_FAILED)

    name = models.CharField(
        max_length=100,
        blank=True,
        default='',
        help_text='Optional label for the run'
    )

    kind = models.CharField(
        max_length=20,
        choices=KIND_CHOICES,
        default=KIND_EXPERIMENT,
        help_text='Single configured mode or the four-mode ablation'
    )

    status = models.CharField(
        max_length=20,
        choices=STATUS_CHOICES,
        default=STATUS_PENDING,
        help_text='Lifecycle status of the run'
    )

    config = models.JSONField(
        default=dict,
        help_text='Validated experiment configuration'
    )

    error = models.TextField(
        blank=True,
        default='',
        help_text='Failure message when the run failed'
    )

    created_at = models.DateTimeField(
        auto_now_add=True,
        help_text='Timestamp when the run was created'
    )

    finished_at = models.DateTimeField(
        null=True,
        blank=True,
        help_text='Timestamp when the run completed or failed'
    )

    class Meta:
        """Model metadata configuration."""
        ordering = ['-created_at', '-id']
        verbose_name = 'Experiment Run'
        verbose_name_plural = 'Experiment Runs'
        indexes = [
            models.Index(fields=['status'], name='maskshift_run_status_idx'),
        ]

    def __str__(self):
        """String representation of the run."""
        label = self.name or f'run {self.pk}'
        return f'{label} - {self.kind} ({self.get_status_display()})'

    def clean(self):
        """
        Validate the lifecycle invariants.

        Raises:
            ValidationError: If a finished run has no finished_at, or a failed run no error
        """
        super().clean()

        if self.status in self.FINISHED_STATUSES and self.finished_at is None:
            raise ValidationError({
                'finished_at': f'A {self.status} run must record when it finished.'
            })
        if self.status == self.STATUS_FAILED and not self.error:
            raise ValidationError({
                'error': 'A failed run must carry an error message.'
            })

    def save(self, *args, **kwargs):
        """Run full validation before every save."""
        self.full_clean()
        super().save(*args, **kwargs)

    def result_table(self):
        """Rebuild the ResultTable stored on this run."""
        return ResultTable([record.to_row() for record in self.results.all()]).sorted()

    def mark_running(self):
        self.status = self.STATUS_RUNNING
        self.save()

    def mark_completed(self, table):
        """Store the result rows and finish the run."""
        with transaction.atomic():
            save_result_table(self, table)
            self.status = self.STATUS_COMPLETED
            self.finished_at = timezone.now()
            self.save()

    def mark_failed(self, message, partial=None):
        """Store any partial rows and record the failure."""
        with transaction.atomic():
            if partial is not None:
                save_result_table(self, partial)
            self.status = self.STATUS_FAILED
            self.error = message or 'Unknown error'
            self.finished_at = timezone.now()
            self.save()


class ResultRecord(models.Model):
    """
    One row of a run's result table.

    Business Rules:
        - levels lie on the 0.1..0.9 grid
        - rmse is nonnegative and gap equals rmse - optimal_rmse
    """

    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        related_name='results',
        help_text='The run this row belongs to'
    )

    mode = models.CharField(
        max_length=10,
        help_text='Decorrelation mode: full, intra, inter or none'
    )

    train_level = models.FloatField(
        validators=[validate_missing_level],
        help_text='Missing level of the training set'
    )

    test_level = models.FloatField(
        validators=[validate_missing_level],
        help_text='Missing level of the test set'
    )

    rmse = models.FloatField(help_text='RMSE of the trained predictor')

    optimal_rmse = models.FloatField(help_text='RMSE of the optimal predictor')

    gap = models.FloatField(help_text='rmse - optimal_rmse')

    seed = models.IntegerField(help_text='Seed of the instance')

    wall_time_ms = models.IntegerField(
        default=0,
        help_text='Wall time in milliseconds (0 unless timing was requested)'
    )

    in_distribution = models.BooleanField(
        default=False,
        help_text='Test condition equals the training condition'
    )

    class Meta:
        """Model metadata configuration."""
        ordering = ['mode', 'train_level', 'test_level', 'seed']
        verbose_name = 'Result Record'
        verbose_name_plural = 'Result Records'
        indexes = [
            models.Index(fields=['run', 'mode'], name='maskshift_result_mode_idx'),
        ]

    def __str__(self):
        """String representation of the row."""
        marker = '*' if self.in_distribution else ''
        return f'{self.mode} {self.train_level:.1f}->{self.test_level:.1f}{marker}: {self.rmse:.4f}'

    def to_row(self):
        return ResultRow(
            mode=self.mode,
            train_level=self.train_level,
            test_level=self.test_level,
            rmse=self.rmse,
            optimal_rmse=self.optimal_rmse,
            gap=self.gap,
            seed=self.seed,
            wall_time_ms=self.wall_time_ms,
            in_distribution=self.in_distribution,
        )

    def clean(self):
        """
        Raises:
            ValidationError: If rmse is negative or the gap does not match
        """
        super().clean()

        if self.rmse is not None and self.rmse < 0:
            raise ValidationError({'rmse': 'RMSE cannot be negative.'})
        if None not in (self.rmse, self.optimal_rmse, self.gap):
            if not math.isclose(self.gap, self.rmse - self.optimal_rmse, rel_tol=0, abs_tol=1e-12):
                raise ValidationError({'gap': 'gap must equal rmse - optimal_rmse.'})

    def save(self, *args, **kwargs):
        """Run full validation before every save."""
        self.full_clean()
        super().save(*args, **kwargs)


def save_result_table(run, table):
    """
    Store every row of a ResultTable on ``run``.

    Returns:
        list: The created ResultRecord instances
    """
    records = []
    for row in table.sorted().rows:
        record = ResultRecord(
            run=run,
            mode=row.mode,
            train_level=row.train_level,
            test_level=row.test_level,
            rmse=row.rmse,
            optimal_rmse=row.optimal_rmse,
            gap=row.gap,
            seed=row.seed,
            wall_time_ms=row.wall_time_ms,
            in_distribution=row.in_distribution,
        )
        record.save()
        records.append(record)
    return records
