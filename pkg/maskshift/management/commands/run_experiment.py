"""
Management command: run an experiment sweep or ablation from the command line.

Examples:
    python manage.py run_experiment --feature gaussian --pattern mar --dim 20 --out results.csv
    python manage.py run_experiment --config sweep.cfg --gamma 2 --ablation --save

Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
"""

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from maskshift.config_io import add_config_arguments, parse_config
from maskshift.exceptions import ConfigError, MaskShiftError
from maskshift.harness import render_table, run_ablation, run_experiment, write_results
from maskshift.models import ExperimentRun
from maskshift.services import execute_run

VERBOSITY_LEVELS = {
    0: logging.WARNING,
    1: logging.INFO,
    2: logging.DEBUG,
    3: logging.DEBUG,
}


class Command(BaseCommand):
    help = (
        'Train predictors on masked synthetic data under one or all decorrelation '
        'modes and report RMSE and gap to the optimal predictor per test level.'
    )

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument('--save', action='store_true',
                            help='store the run and its rows in the database')
        parser.add_argument('--name', default='', help='label for a saved run')

    def handle(self, *args, **options):
        logging.getLogger('maskshift').setLevel(VERBOSITY_LEVELS.get(options['verbosity'], logging.DEBUG))

        try:
            config = parse_config(
                options,
                options.get('config_file'),
                defaults={'workers': settings.MASKSHIFT['MAX_WORKERS']},
            )
        except ConfigError as error:
            raise CommandError(str(error), returncode=2)

        try:
            if options['save']:
                kind = ExperimentRun.KIND_ABLATION if config.ablation else ExperimentRun.KIND_EXPERIMENT
                run = ExperimentRun.objects.create(name=options['name'], kind=kind, config=config.as_dict())
                table = execute_run(run, config)
                self.stdout.write(f'Saved run {run.pk}')
                if not config.out:
                    path = Path(settings.MASKSHIFT['RESULTS_DIR']) / f'run-{run.pk}.csv'
                    write_results(table, path)
                    self.stdout.write(f'Wrote {len(table)} rows to {path}')
            elif config.ablation:
                table = run_ablation(config)
            else:
                table = run_experiment(config)
        except (MaskShiftError, OSError) as error:
            raise CommandError(f'Run failed: {error}', returncode=1)

        self.stdout.write(render_table(table))
        if config.out:
            self.stdout.write(self.style.SUCCESS(f'Wrote {len(table)} rows to {config.out}'))
