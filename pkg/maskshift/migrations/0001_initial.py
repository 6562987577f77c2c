# Generated by Django 4.2.9 on 2026-10-17 09:12

from django.db import migrations, models
import django.db.models.deletion
import maskshift.validators


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(blank=True, default='', help_text='Optional label for the run', max_length=100)),
                ('kind', models.CharField(choices=[('experiment', 'Experiment'), ('ablation', 'Ablation')], default='experiment', help_text='Single configured mode or the four-mode ablation', max_length=20)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', help_text='Lifecycle status of the run', max_length=20)),
                ('config', models.JSONField(default=dict, help_text='Validated experiment configuration')),
                ('error', models.TextField(blank=True, default='', help_text='Failure message when the run failed')),
                ('created_at', models.DateTimeField(auto_now_add=True, help_text='Timestamp when the run was created')),
                ('finished_at', models.DateTimeField(blank=True, help_text='Timestamp when the run completed or failed', null=True)),
            ],
            options={
                'verbose_name': 'Experiment Run',
                'verbose_name_plural': 'Experiment Runs',
                'ordering': ['-created_at', '-id'],
                'indexes': [models.Index(fields=['status'], name='maskshift_run_status_idx')],
            },
        ),
        migrations.CreateModel(
            name='ResultRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('mode', models.CharField(help_text='Decorrelation mode: full, intra, inter or none', max_length=10)),
                ('train_level', models.FloatField(help_text='Missing level of the training set', validators=[maskshift.validators.validate_missing_level])),
                ('test_level', models.FloatField(help_text='Missing level of the test set', validators=[maskshift.validators.validate_missing_level])),
                ('rmse', models.FloatField(help_text='RMSE of the trained predictor')),
                ('optimal_rmse', models.FloatField(help_text='RMSE of the optimal predictor')),
                ('gap', models.FloatField(help_text='rmse - optimal_rmse')),
                ('seed', models.IntegerField(help_text='Seed of the instance')),
                ('wall_time_ms', models.IntegerField(default=0, help_text='Wall time in milliseconds (0 unless timing was requested)')),
                ('in_distribution', models.BooleanField(default=False, help_text='Test condition equals the training condition')),
                ('run', models.ForeignKey(help_text='The run this row belongs to', on_delete=django.db.models.deletion.CASCADE, related_name='results', to='maskshift.experimentrun')),
            ],
            options={
                'verbose_name': 'Result Record',
                'verbose_name_plural': 'Result Records',
                'ordering': ['mode', 'train_level', 'test_level', 'seed'],
                'indexes': [models.Index(fields=['run', 'mode'], name='maskshift_result_mode_idx')],
            },
        ),
    ]
