"""
Mask generation under the three missing patterns.

Every sample first draws its own missing rate r_s: the configured level with
probability 0.8, otherwise one of the other eight grid levels (0.025 each).
The mask is then drawn by pattern:

- MCAR-Ind: each entry missing independently with probability r_s
- MCAR: one window of floor(n * r_s) consecutive missing entries
- MAR: 10% anchor features always observed; every other feature is missing
  with a logistic probability of the anchor values, calibrated so that the
  expected missing fraction among non-anchors equals r_s

Masks use 1 for observed and 0 for missing.
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from types import MappingProxyType

import numpy as np
import pandas as pd
from scipy import optimize, special

from .exceptions import CalibrationError, StructuralError
from .synthetic_data import feature_columns, sample_features

logger = logging.getLogger(__name__)

MISSING_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
LEVEL_PROBABILITY = 0.8
OTHER_LEVEL_PROBABILITY = 0.025

ANCHOR_FRACTION_DENOMINATOR = 10
MAR_CALIBRATION_DRAWS = 10_000
MAR_CALIBRATION_TOLERANCE = 0.005
MAR_OFFSET_BRACKET = (-50.0, 50.0)


class MissingPattern(str, Enum):
    MCAR_IND = 'mcar-ind'
    MCAR = 'mcar'
    MAR = 'mar'


def check_level(level):
    """
    Return the grid value matching ``level``.

    Raises:
        StructuralError: If the level is not one of 0.1, 0.2, ..., 0.9.
    """
    for grid_level in MISSING_LEVELS:
        if np.isclose(level, grid_level, rtol=0, atol=1e-9):
            return grid_level
    raise StructuralError(
        f"Missing level {level} is not on the grid {', '.join(map(str, MISSING_LEVELS))}."
    )


def _check_rates(rates):
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    if np.any((rates < 0) | (rates > 1)) or not np.all(np.isfinite(rates)):
        raise StructuralError('Sample missing rates must lie in [0, 1].')
    return rates


def sample_missing_rates(level, size, rng):
    """Per-sample missing rates for ``size`` samples at ``level``."""
    level = check_level(level)
    probabilities = np.full(len(MISSING_LEVELS), OTHER_LEVEL_PROBABILITY)
    probabilities[MISSING_LEVELS.index(level)] = LEVEL_PROBABILITY
    picks = rng.choice(len(MISSING_LEVELS), size=size, p=probabilities)
    return np.asarray(MISSING_LEVELS)[picks]


def sample_missing_rate(level, rng):
    return float(sample_missing_rates(level, 1, rng)[0])


def window_length(n, rate):
    """floor(n * rate), robust to representation error in the product."""
    return int(np.floor(n * rate + 1e-9))


def mcar_ind_masks(rates, n, rng):
    rates = _check_rates(rates)
    return (rng.random((rates.shape[0], n)) >= rates[:, None]).astype(float)


def mcar_window_masks(rates, n, rng):
    rates = _check_rates(rates)
    lengths = np.floor(n * rates + 1e-9).astype(int)
    starts = rng.integers(0, n - lengths + 1)
    columns = np.arange(n)[None, :]
    inside = (columns >= starts[:, None]) & (columns < (starts + lengths)[:, None])
    return (~inside).astype(float)


def mcar_ind_mask(n, rate, rng):
    """Single MCAR-Ind mask: each entry missing with probability ``rate``."""
    return mcar_ind_masks([rate], n, rng)[0]


def mcar_window_mask(n, rate, rng):
    """Single MCAR mask: floor(n * rate) consecutive missing entries, no wrap-around."""
    return mcar_window_masks([rate], n, rng)[0]


@dataclass(frozen=True, eq=False)
class MarModel:
    """
    Logistic MAR mechanism driven by always-observed anchor features.

    Attributes:
        n (int): feature dimension
        anchors (ndarray): indices always observed
        modeled (ndarray): the other indices, whose masks depend on the anchors
        coef (ndarray): (len(modeled), len(anchors)) logistic weights
        bias (ndarray): (len(modeled),) logistic biases
        offsets (Mapping): shared logit offset per calibrated sample rate
        scaled (bool): whether coef/bias were standardized on feature draws
    """

    n: int
    anchors: np.ndarray
    modeled: np.ndarray
    coef: np.ndarray
    bias: np.ndarray
    offsets: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    scaled: bool = False

    def __post_init__(self):
        if np.intersect1d(self.anchors, self.modeled).size:
            raise StructuralError('Anchor and modeled feature sets overlap.')
        if np.union1d(self.anchors, self.modeled).size != self.n:
            raise StructuralError('Anchors and modeled features must cover every index.')
        if self.coef.shape != (self.modeled.size, self.anchors.size):
            raise StructuralError(f'MAR coefficient shape {self.coef.shape} is inconsistent.')
        if not np.all(np.isfinite(self.bias)):
            raise StructuralError('MAR biases must be finite.')
        object.__setattr__(self, 'offsets', MappingProxyType(dict(self.offsets)))

    def logits(self, features):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        return features[:, self.anchors] @ self.coef.T + self.bias

    def is_calibrated(self, rate):
        return rate in (0.0, 1.0) or float(rate) in self.offsets

    def missing_probabilities(self, features, rates):
        """
        Per-entry missing probabilities of the modeled features.

        Rates 0 and 1 map to probabilities 0 and 1 without calibration.
        """
        rates = _check_rates(rates)
        logits = self.logits(features)
        if rates.shape[0] == 1 and logits.shape[0] > 1:
            rates = np.repeat(rates, logits.shape[0])
        missing = [float(rate) for rate in np.unique(rates) if not self.is_calibrated(rate)]
        if missing:
            raise StructuralError(f'MAR model is not calibrated for rates {missing}.')

        probabilities = np.empty_like(logits)
        for rate in np.unique(rates):
            rows = rates == rate
            if rate == 0.0:
                probabilities[rows] = 0.0
            elif rate == 1.0:
                probabilities[rows] = 1.0
            else:
                probabilities[rows] = special.expit(logits[rows] + self.offsets[float(rate)])
        return probabilities


def make_mar_model(n, rng):
    """
    Pick floor(0.1 n) anchors uniformly and draw standard-normal logistic
    weights for every other feature.

    Raises:
        StructuralError: If n < 10 (the anchor set would be empty).
    """
    if n < ANCHOR_FRACTION_DENOMINATOR:
        raise StructuralError('MAR masks need n >= 10 so that at least one anchor exists.')
    n_anchors = n // ANCHOR_FRACTION_DENOMINATOR
    anchors = np.sort(rng.choice(n, size=n_anchors, replace=False))
    modeled = np.setdiff1d(np.arange(n), anchors)
    coef = rng.standard_normal((modeled.size, n_anchors))
    return MarModel(n, anchors, modeled, coef, np.zeros(modeled.size))


def _standardize_logits(model, features):
    # Each modeled feature gets a zero-mean, unit-std logit over the draws.
    logits = model.logits(features)
    centers = logits.mean(axis=0)
    scales = logits.std(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    return replace(
        model,
        coef=model.coef / scales[:, None],
        bias=(model.bias - centers) / scales,
        scaled=True,
    )


def calibrate_mar(model, spec, rate, rng=None, features=None,
                  draws=MAR_CALIBRATION_DRAWS, tolerance=MAR_CALIBRATION_TOLERANCE):
    """
    Fit the shared offset so the expected missing fraction among non-anchors
    (Monte Carlo over feature draws) matches ``rate``.

    Args:
        model (MarModel): model to calibrate
        spec (FeatureSpec): complete-feature distribution
        rate (float): target sample missing rate in (0, 1)
        rng (numpy.random.Generator): stream for the feature draws
        features (ndarray): optional pre-drawn features, reused across rates

    Returns:
        MarModel: a copy with the offset for ``rate`` recorded

    Raises:
        CalibrationError: If the bracket does not contain the target or the
            fitted rate misses it by more than ``tolerance``.
    """
    rate = float(rate)
    if features is None:
        if rng is None:
            raise StructuralError('calibrate_mar needs either rng or pre-drawn features.')
        features, _ = sample_features(spec, draws, rng)
    if not model.scaled:
        model = _standardize_logits(model, features)
    logits = model.logits(features)

    def excess(offset):
        return float(special.expit(logits + offset).mean()) - rate

    low, high = MAR_OFFSET_BRACKET
    if excess(low) > 0 or excess(high) < 0:
        raise CalibrationError(
            f'Cannot bracket missing rate {rate}: achievable range '
            f'[{excess(low) + rate:.4f}, {excess(high) + rate:.4f}].'
        )
    offset = optimize.brentq(excess, low, high, xtol=1e-12)
    achieved = excess(offset) + rate
    if abs(achieved - rate) > tolerance:
        raise CalibrationError(f'Calibrated rate {achieved:.4f} misses target {rate}.')

    logger.debug('MAR offset %.4f calibrated for rate %.1f', offset, rate)
    return replace(model, offsets={**model.offsets, rate: offset})


def calibrate_mar_levels(model, spec, rng, levels=MISSING_LEVELS, draws=MAR_CALIBRATION_DRAWS):
    """Calibrate every grid level on one shared set of feature draws."""
    features, _ = sample_features(spec, draws, rng)
    for level in levels:
        model = calibrate_mar(model, spec, level, features=features)
    return model


def mar_masks(model, features, rates, rng):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    rates = _check_rates(rates)
    if features.shape[1] != model.n:
        raise StructuralError(f'MAR model has n={model.n}, features have {features.shape[1]}.')
    probabilities = model.missing_probabilities(features, rates)
    masks = np.ones_like(features)
    masks[:, model.modeled] = (rng.random(probabilities.shape) >= probabilities).astype(float)
    return masks


def mar_mask(model, x, rate, rng):
    """Single MAR mask for complete feature vector ``x``."""
    return mar_masks(model, np.asarray(x)[None], [rate], rng)[0]


@dataclass(frozen=True, eq=False)
class MaskedDataset:
    """
    The learner's view of the data.

    Attributes:
        features (ndarray): zero-imputed features x * m, (N, n)
        masks (ndarray): 1 observed / 0 missing, (N, n)
        labels (ndarray): (N,)
        rates (ndarray): per-sample missing rate that produced each mask

    Invariants:
        - features are exactly 0 wherever the mask is 0
        - observed_counts (N^k) and pair_counts (N^kl) agree with the masks
    """

    features: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    rates: np.ndarray = None

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=float))
        masks = np.atleast_2d(np.asarray(self.masks, dtype=float))
        labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if features.shape != masks.shape or features.shape[0] != labels.shape[0]:
            raise StructuralError(
                f'Features {features.shape}, masks {masks.shape} and labels '
                f'{labels.shape} disagree.'
            )
        if not np.all((masks == 0) | (masks == 1)):
            raise StructuralError('Masks must be binary.')
        if np.any(features[masks == 0] != 0):
            raise StructuralError('Features must be zero-imputed on missing entries.')
        rates = np.full(labels.shape[0], np.nan) if self.rates is None else np.asarray(self.rates, dtype=float)
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'masks', masks)
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'rates', rates)

    @classmethod
    def from_complete(cls, features, masks, labels, rates=None):
        """Zero-impute complete features with the given masks."""
        masks = np.asarray(masks, dtype=float)
        return cls(np.asarray(features, dtype=float) * masks, masks, labels, rates)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n(self):
        return self.features.shape[1]

    @cached_property
    def observed_counts(self):
        """N^k: samples observing feature k."""
        return self.masks.sum(axis=0).astype(int)

    @cached_property
    def pair_counts(self):
        """N^kl: samples observing both k and l (diagonal equals N^k)."""
        return np.rint(self.masks.T @ self.masks).astype(int)

    def missing_fraction(self):
        return 1.0 - float(self.masks.mean()) if len(self) else 0.0

    def subset(self, rows):
        return MaskedDataset(self.features[rows], self.masks[rows], self.labels[rows], self.rates[rows])

    def checksum(self):
        digest = hashlib.sha256()
        for array in (self.features, self.masks, self.labels):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


def apply_masks(data, pattern, level, rng, mar_model=None, rates=None):
    """
    Mask a complete dataset.

    Args:
        data (CompleteDataset): complete rows
        pattern (MissingPattern): missing pattern
        level (float): grid level used to draw per-sample rates
        rng (numpy.random.Generator): mask stream
        mar_model (MarModel): calibrated model, required for MAR
        rates (array): explicit per-sample rates; overrides ``level``

    Returns:
        MaskedDataset
    """
    pattern = MissingPattern(pattern)
    size, n = data.features.shape
    if rates is None:
        rates = sample_missing_rates(level, size, rng)
    else:
        rates = _check_rates(rates)
        if rates.shape[0] == 1:
            rates = np.repeat(rates, size)
        if rates.shape[0] != size:
            raise StructuralError(f'Got {rates.shape[0]} rates for {size} samples.')

    if pattern is MissingPattern.MCAR_IND:
        masks = mcar_ind_masks(rates, n, rng)
    elif pattern is MissingPattern.MCAR:
        masks = mcar_window_masks(rates, n, rng)
    else:
        if mar_model is None:
            raise StructuralError('MAR masks need a calibrated MarModel.')
        masks = mar_masks(mar_model, data.features, rates, rng)

    masked = MaskedDataset.from_complete(data.features, masks, data.labels, rates)
    logger.debug(
        'Applied %s masks at level %s: missing fraction %.3f',
        pattern.value, level, masked.missing_fraction(),
    )
    return masked


def write_masked_csv(dataset, path):
    """Write columns x_1..x_n (zero-imputed), m_1..m_n, y."""
    n = dataset.n
    frame = pd.DataFrame(dataset.features, columns=feature_columns(n))
    masks = pd.DataFrame(dataset.masks.astype(int), columns=[f'm_{i}' for i in range(1, n + 1)])
    frame = pd.concat([frame, masks], axis=1)
    frame['y'] = dataset.labels
    frame.to_csv(path, index=False)
    logger.info('Wrote %d masked rows to %s', len(dataset), path)
