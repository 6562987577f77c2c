"""
Experiment orchestration.

A run draws one random instance (feature distribution, label model and, for
MAR, a calibrated mask model) per seed, builds a masked training set per
training level and a masked test set per test level, fits one arm per
(training level, decorrelation mode) and scores every arm on every test set
against the optimal predictor.

Every random draw comes from its own named sub-stream of the seed, so
changing, say, the epoch count never changes the data.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum

import numpy as np
import pandas as pd

from .decorrelation import (
    DEFAULT_GAMMA,
    DEFAULT_Q,
    DEFAULT_WEIGHT_ITERATIONS,
    DEFAULT_WEIGHT_LR,
    DecorrMode,
    WeightOptConfig,
    draw_banks,
    fit_weights,
    write_weights_csv,
)
from .exceptions import ExperimentFailed, MaskShiftError, StructuralError
from .mask_gen import MISSING_LEVELS, MissingPattern, apply_masks, calibrate_mar_levels, make_mar_model, write_masked_csv
from .oracle import optimal_predict_batch
from .predictor import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    HeadKind,
    TrainConfig,
    init_predictor,
    predict_dataset,
    save_model,
    train_predictor,
    write_loss_trace,
)
from .synthetic_data import (
    DEFAULT_SNR,
    FeatureKind,
    make_example_spec,
    make_gaussian_spec,
    make_label_model,
    make_mixture_spec,
    sample_dataset,
)

logger = logging.getLogger(__name__)

FEATURE_EXAMPLE = 'example'
FEATURE_SOURCES = tuple(kind.value for kind in FeatureKind) + (FEATURE_EXAMPLE,)
RESULT_COLUMNS = [
    'mode',
    'train_level',
    'test_level',
    'rmse',
    'optimal_rmse',
    'gap',
    'seed',
    'wall_time_ms',
]


class Stream(IntEnum):
    """Sub-stream identifiers under the master seed."""

    INSTANCE = 0
    TRAIN_DATA = 1
    TRAIN_MASKS = 2
    BANKS = 3
    WEIGHT_INIT = 4
    PREDICTOR_INIT = 5
    SHUFFLE = 6
    TEST_DATA = 7
    TEST_MASKS = 8
    MAR = 9


def rng_stream(seed, stream, *keys):
    sequence = np.random.SeedSequence(seed, spawn_key=(int(stream), *(int(key) for key in keys)))
    return np.random.default_rng(sequence)


def level_key(level):
    return int(round(level * 10))


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Parameters of one experiment run. Defaults follow the synthetic benchmark
    protocol (n=50, 16384 samples, every test level, q=5, gamma=1, 1000 epochs
    of batch 64 at lr 0.001).
    """

    feature: str = FeatureKind.GAUSSIAN.value
    pattern: str = MissingPattern.MCAR_IND.value
    train_pattern: str = ''
    test_pattern: str = ''
    dim: int = 50
    train_n: int = 16384
    test_n: int = 16384
    train_level: float = 0.5
    train_levels: tuple = ()
    test_levels: tuple = MISSING_LEVELS
    mode: str = DecorrMode.FULL.value
    ablation: bool = False
    gamma: float = DEFAULT_GAMMA
    q: int = DEFAULT_Q
    head: str = HeadKind.LINEAR.value
    depth: int = 2
    width: int = 256
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    weight_lr: float = DEFAULT_WEIGHT_LR
    weight_iters: int = DEFAULT_WEIGHT_ITERATIONS
    snr: float = DEFAULT_SNR
    coef_scale: float = 1.0
    seed: int = 0
    seeds: int = 1
    workers: int = 1
    timing: bool = False
    out: str = ''
    export_dir: str = ''

    @property
    def effective_train_pattern(self):
        return MissingPattern(self.train_pattern or self.pattern)

    @property
    def effective_test_pattern(self):
        return MissingPattern(self.test_pattern or self.pattern)

    @property
    def effective_train_levels(self):
        return tuple(self.train_levels) or (self.train_level,)

    @property
    def modes(self):
        return tuple(DecorrMode) if self.ablation else (DecorrMode(self.mode),)

    @property
    def hidden(self):
        return (self.width,) * self.depth

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ResultRow:
    mode: str
    train_level: float
    test_level: float
    rmse: float
    optimal_rmse: float
    gap: float
    seed: int
    wall_time_ms: int = 0
    in_distribution: bool = False

    def sort_key(self):
        return (self.mode, self.train_level, self.test_level, self.seed)


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def sorted(self):
        return ResultTable(sorted(self.rows, key=ResultRow.sort_key))

    def to_frame(self):
        frame = pd.DataFrame([asdict(row) for row in self.sorted().rows], columns=RESULT_COLUMNS)
        return frame.astype({'seed': int, 'wall_time_ms': int})

    def for_mode(self, mode):
        return [row for row in self.rows if row.mode == DecorrMode(mode).value]


def rmse(predictions, labels):
    """
    Raises:
        StructuralError: On empty or mismatched inputs.
    """
    predictions = np.asarray(predictions, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if predictions.shape != labels.shape:
        raise StructuralError(f'{predictions.shape[0]} predictions for {labels.shape[0]} labels.')
    if predictions.size == 0:
        raise StructuralError('RMSE of an empty sample is undefined.')
    return float(np.sqrt(np.mean((predictions - labels) ** 2)))


@dataclass(frozen=True, eq=False)
class Instance:
    spec: object
    label_model: object
    mar_model: object = None


def make_instance(config, seed):
    """Feature spec and label model for ``seed``, plus a MAR model calibrated on every level when needed."""
    rng = rng_stream(seed, Stream.INSTANCE)
    if config.feature == FEATURE_EXAMPLE:
        spec = make_example_spec(config.dim)
        label_model = replace(make_label_model(spec, config.snr, rng, config.coef_scale), intercept=0.0)
    elif FeatureKind(config.feature) is FeatureKind.GAUSSIAN_MIX:
        spec = make_mixture_spec(config.dim, rng)
        label_model = make_label_model(spec, config.snr, rng, config.coef_scale)
    else:
        spec = make_gaussian_spec(config.dim, config.feature, rng)
        label_model = make_label_model(spec, config.snr, rng, config.coef_scale)

    mar_model = None
    if MissingPattern.MAR in (config.effective_train_pattern, config.effective_test_pattern):
        mar_rng = rng_stream(seed, Stream.MAR)
        mar_model = calibrate_mar_levels(make_mar_model(config.dim, mar_rng), spec, mar_rng)
    return Instance(spec, label_model, mar_model)


def make_masked_set(instance, pattern, level, size, seed, data_stream, mask_stream):
    data = sample_dataset(instance.spec, instance.label_model, size, rng_stream(seed, data_stream, level_key(level)))
    mask_rng = rng_stream(seed, mask_stream, level_key(level))
    return apply_masks(data, pattern, level, mask_rng, mar_model=instance.mar_model)


@dataclass(eq=False)
class PreparedRun:
    """Everything the arms of one seed share."""

    config: ExperimentConfig
    seed: int
    instance: Instance
    banks: object
    train_sets: dict
    test_sets: dict
    optimal_rmse: dict


def prepare_run(config, seed):
    instance = make_instance(config, seed)
    train_sets = {
        level: make_masked_set(
            instance, config.effective_train_pattern, level, config.train_n, seed,
            Stream.TRAIN_DATA, Stream.TRAIN_MASKS,
        )
        for level in config.effective_train_levels
    }
    test_sets = {
        level: make_masked_set(
            instance, config.effective_test_pattern, level, config.test_n, seed,
            Stream.TEST_DATA, Stream.TEST_MASKS,
        )
        for level in config.test_levels
    }
    optimal = {
        level: rmse(
            optimal_predict_batch(instance.spec, instance.label_model, data.features, data.masks),
            data.labels,
        )
        for level, data in test_sets.items()
    }
    banks = draw_banks(config.dim, config.q, rng_stream(seed, Stream.BANKS))
    logger.info(
        'Prepared seed %d: %s features, %d train sets, %d test sets',
        seed, config.feature, len(train_sets), len(test_sets),
    )
    return PreparedRun(config, seed, instance, banks, train_sets, test_sets, optimal)


@dataclass(frozen=True, eq=False)
class Arm:
    """One fitted (training level, mode) combination."""

    train_level: float
    mode: DecorrMode
    weight_fit: object
    trained: object
    train_checksum: str
    elapsed_ms: int


def fit_arm(prepared, train_level, mode):
    config = prepared.config
    seed = prepared.seed
    key = level_key(train_level)
    train = prepared.train_sets[train_level]
    started = time.perf_counter()

    weight_fit = fit_weights(
        train,
        mode,
        config.gamma,
        WeightOptConfig(iterations=config.weight_iters, lr=config.weight_lr),
        prepared.banks,
        rng_stream(seed, Stream.WEIGHT_INIT, key),
    )
    model = init_predictor(config.dim, config.head, rng_stream(seed, Stream.PREDICTOR_INIT, key), config.hidden)
    trained = train_predictor(
        model,
        train,
        weight_fit.weights,
        TrainConfig(epochs=config.epochs, batch_size=config.batch_size, lr=config.lr),
        rng_stream(seed, Stream.SHUFFLE, key),
    )
    elapsed_ms = int(round(1000 * (time.perf_counter() - started)))
    arm = Arm(train_level, DecorrMode(mode), weight_fit, trained, train.checksum(), elapsed_ms)
    if config.export_dir:
        export_arm(prepared, arm, config.export_dir)
    return arm


def export_arm(prepared, arm, directory):
    """Write the training set, weights, loss trace and checkpoint of an arm."""
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f'seed{prepared.seed}_train{level_key(arm.train_level)}_{arm.mode.value}')
    write_masked_csv(prepared.train_sets[arm.train_level], f'{stem}_train.csv')
    write_weights_csv(arm.weight_fit.weights, f'{stem}_weights.csv')
    write_loss_trace(arm.trained.trace, f'{stem}_loss.csv')
    save_model(arm.trained.model, f'{stem}_model.npz')


def evaluate_arm(prepared, arm):
    config = prepared.config
    same_pattern = config.effective_train_pattern is config.effective_test_pattern
    rows = []
    for test_level in config.test_levels:
        started = time.perf_counter()
        test = prepared.test_sets[test_level]
        score = rmse(predict_dataset(arm.trained.model, test), test.labels)
        optimal = prepared.optimal_rmse[test_level]
        elapsed_ms = arm.elapsed_ms + int(round(1000 * (time.perf_counter() - started)))
        row = ResultRow(
            mode=arm.mode.value,
            train_level=arm.train_level,
            test_level=test_level,
            rmse=score,
            optimal_rmse=optimal,
            gap=score - optimal,
            seed=prepared.seed,
            wall_time_ms=elapsed_ms if config.timing else 0,
            in_distribution=same_pattern and test_level == arm.train_level,
        )
        logger.debug(
            '%s train %.1f test %.1f: rmse %.4f optimal %.4f gap %.4f',
            row.mode, row.train_level, row.test_level, row.rmse, row.optimal_rmse, row.gap,
        )
        rows.append(row)
    return rows


def _run_seed(config, seed, executor, table):
    prepared = prepare_run(config, seed)
    tasks = [(level, mode) for level in config.effective_train_levels for mode in config.modes]
    slots = [None] * len(tasks)

    def run_task(index):
        level, mode = tasks[index]
        slots[index] = evaluate_arm(prepared, fit_arm(prepared, level, mode))

    futures = [executor.submit(run_task, index) for index in range(len(tasks))]
    failure = None
    for future in futures:
        try:
            future.result()
        except MaskShiftError as error:
            failure = failure or error
    for rows in slots:
        if rows:
            table.rows.extend(rows)
    if failure is not None:
        raise failure


def run_experiment(config):
    """
    Run every seed, training level and mode of ``config``.

    Returns:
        ResultTable: rows sorted by (mode, train_level, test_level, seed)

    Raises:
        ExperimentFailed: If any arm fails; rows finished before the failure
            are attached and, when ``config.out`` is set, written there.
    """
    table = ResultTable()
    logger.info(
        'Starting run: %s/%s n=%d, modes %s, %d seed(s), %d worker(s)',
        config.feature, config.pattern, config.dim,
        ','.join(mode.value for mode in config.modes), config.seeds, config.workers,
    )
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as executor:
        for seed in range(config.seed, config.seed + config.seeds):
            try:
                _run_seed(config, seed, executor, table)
            except MaskShiftError as error:
                partial = table.sorted()
                if config.out and len(partial):
                    write_results(partial, config.out)
                logger.error('Run failed at seed %d: %s (%d rows kept)', seed, error, len(partial))
                raise ExperimentFailed(f'Run failed at seed {seed}: {error}', partial) from error

    table = table.sorted()
    if config.out:
        write_results(table, config.out)
    logger.info('Run finished with %d rows', len(table))
    return table


def run_ablation(config):
    """All four decorrelation modes on the same instance, data and seeds."""
    return run_experiment(replace(config, ablation=True))


def write_results(table, path):
    """CSV with header mode,train_level,test_level,rmse,optimal_rmse,gap,seed,wall_time_ms."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    table.to_frame().to_csv(path, index=False, lineterminator='\n')
    logger.info('Wrote %d result rows to %s', len(table), path)


def results_csv(table):
    return table.to_frame().to_csv(index=False, lineterminator='\n')


def render_table(table):
    """Console view; in-distribution rows carry a trailing '*'."""
    lines = [f"{'mode':<6} {'train':>5} {'test':>6} {'rmse':>9} {'optimal':>9} {'gap':>9} {'seed':>5}"]
    for row in table.sorted().rows:
        marker = '*' if row.in_distribution else ' '
        lines.append(
            f'{row.mode:<6} {row.train_level:>5.1f} {row.test_level:>5.1f}{marker} '
            f'{row.rmse:>9.4f} {row.optimal_rmse:>9.4f} {row.gap:>9.4f} {row.seed:>5d}'
        )
    return '\n'.join(lines)
