"""
Experiment configuration from flags and key=value files.

File format: one ``key=value`` per line, blank lines and ``#`` comments
ignored, keys named like the ExperimentConfig fields. Lists are written
comma-separated. Command-line values override file values.
"""

import argparse
import logging
from dataclasses import fields

from .exceptions import ConfigError
from .harness import ExperimentConfig
from .serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)

CONFIG_KEYS = tuple(item.name for item in fields(ExperimentConfig))


def read_config_file(path):
    """
    Read a key=value file into a dict of raw strings.

    Raises:
        ConfigError: On unreadable files, lines without '=', empty or repeated keys.
    """
    try:
        with open(path, encoding='utf-8') as handle:
            lines = handle.readlines()
    except OSError as error:
        raise ConfigError(f'Cannot read config file {path}: {error}')

    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition('=')
        key = key.strip()
        if not separator or not key:
            raise ConfigError(f'{path}:{number}: expected key=value, got "{raw.strip()}".')
        if key in values:
            raise ConfigError(f'{path}:{number}: key "{key}" is repeated.')
        values[key] = value.strip()
    return values


def config_from_mapping(values):
    """
    Validate a mapping of raw values through ExperimentConfigSerializer.

    Raises:
        ConfigError: With the serializer's per-field errors.
    """
    serializer = ExperimentConfigSerializer(data=dict(values))
    if not serializer.is_valid():
        details = '; '.join(
            f'{key}: {" ".join(str(message) for message in messages)}'
            for key, messages in serializer.errors.items()
        )
        raise ConfigError(f'Invalid configuration ({details})', errors=serializer.errors)
    return serializer.to_config()


def parse_config(cli_args=None, config_file=None, defaults=None):
    """
    Merge a config file with command-line values and validate the result.

    Args:
        cli_args (Mapping): parsed flag values keyed by config field; keys that
            are not config fields (e.g. Django's own options) are ignored
        config_file (str): optional key=value file
        defaults (Mapping): service-level values applied before the file

    Returns:
        ExperimentConfig
    """
    values = dict(defaults or {})
    if config_file:
        values.update(read_config_file(config_file))
    for key, value in (cli_args or {}).items():
        if key in CONFIG_KEYS and value is not None:
            values[key] = value
    config = config_from_mapping(values)
    logger.debug('Parsed configuration: %s', config)
    return config


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(repr(float(item)) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config):
    """Render ``config`` in the key=value file format."""
    lines = [f'{key}={_format_value(getattr(config, key))}' for key in CONFIG_KEYS]
    return '\n'.join(lines) + '\n'


def add_config_arguments(parser):
    """
    Register one flag per config field. Flags default to SUPPRESS so that
    only values actually given on the command line override the file.
    """
    group = parser.add_argument_group('experiment')
    suppress = argparse.SUPPRESS
    group.add_argument('--config', dest='config_file', default=None,
                       help='key=value configuration file')
    group.add_argument('--feature', default=suppress,
                       help='gaussian, gaussian-ind, gaussian-mix or example')
    group.add_argument('--pattern', default=suppress, help='mcar-ind, mcar or mar')
    group.add_argument('--train-pattern', dest='train_pattern', default=suppress,
                       help='missing pattern of the training sets (defaults to --pattern)')
    group.add_argument('--test-pattern', dest='test_pattern', default=suppress,
                       help='missing pattern of the test sets (defaults to --pattern)')
    group.add_argument('--dim', type=int, default=suppress, help='feature dimension n')
    group.add_argument('--train-n', dest='train_n', type=int, default=suppress)
    group.add_argument('--test-n', dest='test_n', type=int, default=suppress)
    group.add_argument('--train-level', dest='train_level', type=float, default=suppress)
    group.add_argument('--train-levels', dest='train_levels', default=suppress,
                       help='comma list; trains one predictor per level')
    group.add_argument('--test-levels', dest='test_levels', default=suppress, help='comma list')
    group.add_argument('--mode', default=suppress, help='full, intra, inter or none')
    group.add_argument('--ablation', action='store_true', default=suppress,
                       help='run all four decorrelation modes')
    group.add_argument('--gamma', type=float, default=suppress)
    group.add_argument('--q', type=int, default=suppress, help='random Fourier features per variable')
    group.add_argument('--head', default=suppress, help='linear or quadratic')
    group.add_argument('--depth', type=int, default=suppress, help='hidden layers of the phi network')
    group.add_argument('--width', type=int, default=suppress, help='hidden width of the phi network')
    group.add_argument('--epochs', type=int, default=suppress)
    group.add_argument('--batch-size', dest='batch_size', type=int, default=suppress)
    group.add_argument('--lr', type=float, default=suppress, help='predictor learning rate')
    group.add_argument('--weight-lr', dest='weight_lr', type=float, default=suppress)
    group.add_argument('--weight-iters', dest='weight_iters', type=int, default=suppress)
    group.add_argument('--snr', type=float, default=suppress)
    group.add_argument('--coef-scale', dest='coef_scale', type=float, default=suppress)
    group.add_argument('--seed', type=int, default=suppress)
    group.add_argument('--seeds', type=int, default=suppress, help='run seeds seed..seed+k-1')
    group.add_argument('--workers', type=int, default=suppress)
    group.add_argument('--timing', action='store_true', default=suppress,
                       help='record wall_time_ms (breaks byte-identical output)')
    group.add_argument('--out', default=suppress, help='result CSV path')
    group.add_argument('--export-dir', dest='export_dir', default=suppress,
                       help='write datasets, weights, loss traces and checkpoints here')
    return group
