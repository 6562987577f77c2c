"""
Run execution shared by the HTTP API and the management command.
"""

import logging

from .config_io import config_from_mapping
from .exceptions import ExperimentFailed, MaskShiftError
from .harness import run_ablation, run_experiment
from .models import ExperimentRun

logger = logging.getLogger(__name__)


def execute_run(run, config=None):
    """
    Execute a stored run synchronously and record its outcome.

    Args:
        run (ExperimentRun): A pending run
        config (ExperimentConfig): Optional pre-validated config; rebuilt from run.config otherwise

    Returns:
        ResultTable: The result rows

    Raises:
        MaskShiftError: After the failure (and any partial rows) is stored on the run
    """
    if config is None:
        config = config_from_mapping(run.config)

    run.mark_running()
    logger.info('Executing run %s (%s)', run.pk, run.kind)
    try:
        if run.kind == ExperimentRun.KIND_ABLATION:
            table = run_ablation(config)
        else:
            table = run_experiment(config)
    except MaskShiftError as error:
        partial = error.partial if isinstance(error, ExperimentFailed) else None
        run.mark_failed(str(error), partial)
        raise

    run.mark_completed(table)
    logger.info('Run %s completed with %d rows', run.pk, len(table))
    return table
