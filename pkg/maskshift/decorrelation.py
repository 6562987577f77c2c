"""
Sample reweighting that removes dependence among feature entries, among mask
entries and between features and masks.

Dependence between two variables is measured by the squared Frobenius norm
of a partial cross-covariance matrix of random Fourier features, computed
only over the samples where the entries involved are observed:

- feature/feature: samples observing both features, each side centered over
  the samples observing that feature
- feature/mask: samples observing the feature; the mask side is centered
  over every sample
- mask/mask: every sample

The optimizer evaluates all pairs at once through one Gram matrix of the
centered, weighted lifts, so the gradient with respect to the weights comes
from a single pass. ``partial_cov`` keeps the per-pair formula for callers
that want one matrix.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import special

from .exceptions import NumericalError, PairSkipped, StructuralError
from .nn_core import AdamState, adam_update

logger = logging.getLogger(__name__)

DEFAULT_Q = 5
DEFAULT_GAMMA = 1.0
DEFAULT_WEIGHT_LR = 0.01
DEFAULT_WEIGHT_ITERATIONS = 500
GAMMA_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)

SQRT2 = np.sqrt(2.0)
TWO_PI = 2.0 * np.pi
# softplus(log(e - 1)) == 1
UNIT_WEIGHT_PARAM = float(np.log(np.expm1(1.0)))


class DecorrMode(str, Enum):
    FULL = 'full'
    INTRA = 'intra'
    INTER = 'inter'
    NONE = 'none'

    @property
    def uses_intra(self):
        return self in (DecorrMode.FULL, DecorrMode.INTRA)

    @property
    def uses_inter(self):
        return self in (DecorrMode.FULL, DecorrMode.INTER)


class VarKind(str, Enum):
    FEATURE = 'x'
    MASK = 'm'


@dataclass(frozen=True)
class Var:
    """A feature entry X_k or a mask entry M_k."""

    kind: VarKind
    index: int

    def __post_init__(self):
        object.__setattr__(self, 'kind', VarKind(self.kind))

    def __str__(self):
        return f'{self.kind.value.upper()}{self.index}'


def feature_var(index):
    return Var(VarKind.FEATURE, index)


def mask_var(index):
    return Var(VarKind.MASK, index)


@dataclass(frozen=True, eq=False)
class RffBank:
    """
    Random Fourier frequencies and phases for one variable.

    Attributes:
        omega (ndarray): (q,) frequencies, standard normal
        beta (ndarray): (q,) phases in [0, 2 pi)
    """

    omega: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if omega.ndim != 1 or omega.shape != beta.shape or omega.size == 0:
            raise StructuralError(f'RFF bank shapes differ: {omega.shape} vs {beta.shape}.')
        if np.any(beta < 0) or np.any(beta >= TWO_PI):
            raise StructuralError('RFF phases must lie in [0, 2 pi).')
        object.__setattr__(self, 'omega', omega)
        object.__setattr__(self, 'beta', beta)

    @property
    def q(self):
        return self.omega.shape[0]


def draw_bank(q, rng):
    if q < 1:
        raise StructuralError('The RFF bank needs q >= 1.')
    return RffBank(rng.standard_normal(q), rng.uniform(0.0, TWO_PI, size=q))


def rff_apply(bank, z):
    """
    sqrt(2) cos(omega z + beta), componentwise over the bank.

    A scalar z gives a (q,) vector; an array of shape S gives S + (q,).
    """
    z = np.asarray(z, dtype=float)
    return SQRT2 * np.cos(np.multiply.outer(z, bank.omega) + bank.beta)


@dataclass(frozen=True, eq=False)
class RffBanks:
    """One bank per feature variable and one per mask variable, fixed for a run."""

    features: tuple
    masks: tuple

    def __post_init__(self):
        if len(self.features) != len(self.masks):
            raise StructuralError('Feature and mask bank counts differ.')
        if len({bank.q for bank in self.features + self.masks}) > 1:
            raise StructuralError('All RFF banks of a run must share q.')

    @property
    def n(self):
        return len(self.features)

    @property
    def q(self):
        return self.features[0].q

    def bank(self, var):
        banks = self.features if var.kind is VarKind.FEATURE else self.masks
        return banks[var.index]

    @cached_property
    def stacked(self):
        """(omega_x, beta_x, omega_m, beta_m), each (n, q)."""
        return tuple(
            np.stack([getattr(bank, name) for bank in banks])
            for banks in (self.features, self.masks)
            for name in ('omega', 'beta')
        )


def draw_banks(n, q, rng):
    """Draw feature banks X_1..X_n, then mask banks M_1..M_n, from one stream."""
    features = tuple(draw_bank(q, rng) for _ in range(n))
    masks = tuple(draw_bank(q, rng) for _ in range(n))
    return RffBanks(features, masks)


def standardize_features(dataset):
    """
    Center and scale each feature over its observed entries.

    Missing entries stay 0. A feature with zero observed spread keeps scale 1.
    """
    masks = dataset.masks
    counts = np.maximum(dataset.observed_counts, 1)
    means = dataset.features.sum(axis=0) / counts
    centered = (dataset.features - means) * masks
    scales = np.sqrt((centered ** 2).sum(axis=0) / counts)
    scales[scales <= 1e-12] = 1.0
    return centered / scales


@dataclass(frozen=True, eq=False)
class LiftedData:
    """
    RFF lifts of every variable of a masked dataset.

    Attributes:
        features (ndarray): (N, n, q) lifts of the (standardized) features
        masks_lifted (ndarray): (N, n, q) lifts of the mask entries
        masks (ndarray): (N, n) observation indicators
        observed_counts (ndarray): N^k
        pair_counts (ndarray): N^kl
    """

    features: np.ndarray
    masks_lifted: np.ndarray
    masks: np.ndarray
    observed_counts: np.ndarray
    pair_counts: np.ndarray

    @property
    def size(self):
        return self.masks.shape[0]

    @property
    def n(self):
        return self.masks.shape[1]

    @property
    def q(self):
        return self.features.shape[2]


def lift(dataset, banks, standardize=True):
    if banks.n != dataset.n:
        raise StructuralError(f'{banks.n} RFF banks for {dataset.n} features.')
    omega_x, beta_x, omega_m, beta_m = banks.stacked
    values = standardize_features(dataset) if standardize else dataset.features
    lifted_features = SQRT2 * np.cos(values[:, :, None] * omega_x[None] + beta_x[None])
    lifted_masks = SQRT2 * np.cos(dataset.masks[:, :, None] * omega_m[None] + beta_m[None])
    return LiftedData(
        lifted_features,
        lifted_masks,
        dataset.masks,
        dataset.observed_counts,
        dataset.pair_counts,
    )


def _as_weights(weights, size):
    if isinstance(weights, WeightVector):
        weights = weights.weights
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.shape[0] != size:
        raise StructuralError(f'Got {weights.shape[0]} weights for {size} samples.')
    return weights


def _centered_terms(lifted, weights, var):
    """Rows usable for ``var`` and w_i u(a_i) minus its centering mean."""
    if var.kind is VarKind.FEATURE:
        observed = lifted.masks[:, var.index] == 1
        values = weights[:, None] * lifted.features[:, var.index]
        center = values[observed].mean(axis=0) if observed.any() else 0.0
        return observed, values - center
    values = weights[:, None] * lifted.masks_lifted[:, var.index]
    center = values.mean(axis=0) if values.shape[0] else 0.0
    return np.ones(values.shape[0], dtype=bool), values - center


def partial_cov(dataset, weights, var_a, var_b, banks, standardize=True, lifted=None):
    """
    Weighted partial cross-covariance of the RFF lifts of two variables.

    Args:
        dataset (MaskedDataset): the masked training data
        weights: per-sample weights (array or WeightVector)
        var_a, var_b (Var): the two variables
        banks (RffBanks): frequencies and phases per variable
        standardize (bool): standardize features over observed entries first

    Returns:
        ndarray: (q, q) matrix; M/X pairs are the transpose of the X/M pair

    Raises:
        PairSkipped: If fewer than two samples are usable for the pair.
        StructuralError: On a variable paired with itself or bad indices.
    """
    if var_a == var_b:
        raise StructuralError(f'Cannot pair {var_a} with itself.')
    for var in (var_a, var_b):
        if not 0 <= var.index < dataset.n:
            raise StructuralError(f'{var} is out of range for n={dataset.n}.')
    if var_a.kind is VarKind.MASK and var_b.kind is VarKind.FEATURE:
        return partial_cov(dataset, weights, var_b, var_a, banks, standardize, lifted).T

    if lifted is None:
        lifted = lift(dataset, banks, standardize)
    weights = _as_weights(weights, len(dataset))
    rows_a, terms_a = _centered_terms(lifted, weights, var_a)
    rows_b, terms_b = _centered_terms(lifted, weights, var_b)
    rows = rows_a & rows_b
    count = int(rows.sum())
    if count < 2:
        raise PairSkipped(var_a, var_b, count)
    return terms_a[rows].T @ terms_b[rows] / (count - 1)


def _block_scales(lifted, mode):
    """
    (2n, 2n) per-block factor 1 / (count - 1)^2; zero for excluded or skipped
    pairs. Rows and columns 0..n-1 are features, n..2n-1 masks.
    """
    n, size = lifted.n, lifted.size
    scales = np.zeros((2 * n, 2 * n))
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    if mode.uses_intra:
        pair_counts = lifted.pair_counts
        usable = upper & (pair_counts >= 2)
        scales[:n, :n][usable] = 1.0 / (pair_counts[usable] - 1.0) ** 2
        if size >= 2:
            scales[n:, n:][upper] = 1.0 / (size - 1.0) ** 2
    if mode.uses_inter:
        counts = lifted.observed_counts
        usable = counts >= 2
        scales[:n, n:][usable, :] = (1.0 / (counts[usable] - 1.0) ** 2)[:, None]
    return scales


class DecorrelationObjective:
    """
    Sum of squared partial cross-covariance norms selected by ``mode`` plus
    gamma * Std(w) / mean(w).
    """

    def __init__(self, lifted, mode=DecorrMode.FULL, gamma=DEFAULT_GAMMA):
        if gamma < 0 or not np.isfinite(gamma):
            raise StructuralError('gamma must be finite and >= 0.')
        self.lifted = lifted
        self.mode = DecorrMode(mode)
        self.gamma = float(gamma)
        scales = _block_scales(lifted, self.mode)
        self.active = bool(scales.any())
        ones = np.ones((lifted.q, lifted.q))
        self.entry_scales = np.kron(scales, ones)
        self.symmetric_scales = self.entry_scales + self.entry_scales.T

    @property
    def size(self):
        return self.lifted.size

    def _stacked_terms(self, weights):
        lifted = self.lifted
        size, n, _ = lifted.features.shape
        observed = lifted.masks[:, :, None]
        counts = np.maximum(lifted.observed_counts, 1)[:, None]

        weighted_features = weights[:, None, None] * lifted.features
        feature_centers = (observed * weighted_features).sum(axis=0) / counts
        feature_terms = observed * (weighted_features - feature_centers)

        weighted_masks = weights[:, None, None] * lifted.masks_lifted
        mask_terms = weighted_masks - weighted_masks.mean(axis=0)
        return np.concatenate(
            [feature_terms.reshape(size, -1), mask_terms.reshape(size, -1)], axis=1
        )

    def covariance_part(self, weights):
        weights = _as_weights(weights, self.size)
        if not self.active:
            return 0.0
        terms = self._stacked_terms(weights)
        gram = terms.T @ terms
        return float(np.sum(self.entry_scales * gram * gram))

    def regularizer(self, weights):
        weights = _as_weights(weights, self.size)
        return self.gamma * float(weights.std() / weights.mean())

    def value(self, weights):
        return self.covariance_part(weights) + self.regularizer(weights)

    def value_and_grad(self, weights):
        """Objective and its gradient with respect to the weights w."""
        weights = _as_weights(weights, self.size)
        lifted = self.lifted
        size, n, q = lifted.features.shape
        grad = np.zeros(size)
        value = 0.0

        if self.active:
            terms = self._stacked_terms(weights)
            gram = terms.T @ terms
            value = float(np.sum(self.entry_scales * gram * gram))
            grad_terms = 2.0 * terms @ (self.symmetric_scales * gram)

            observed = lifted.masks[:, :, None]
            counts = np.maximum(lifted.observed_counts, 1)[None, :, None]
            grad_features = observed * grad_terms[:, : n * q].reshape(size, n, q)
            grad_features = grad_features - grad_features.sum(axis=0, keepdims=True) / counts
            grad += np.sum(observed * lifted.features * grad_features, axis=(1, 2))

            grad_masks = grad_terms[:, n * q:].reshape(size, n, q)
            grad_masks = grad_masks - grad_masks.mean(axis=0, keepdims=True)
            grad += np.sum(lifted.masks_lifted * grad_masks, axis=(1, 2))

        mean = weights.mean()
        spread = weights.std()
        value += self.gamma * spread / mean
        if self.gamma and spread > 1e-15 * mean:
            grad += self.gamma * (
                (weights - mean) / (size * spread * mean) - spread / (mean ** 2 * size)
            )
        return value, grad

    def value_and_grad_params(self, params):
        """Objective and gradient with respect to the free parameters v."""
        params = np.asarray(params, dtype=float)
        softplus = np.logaddexp(0.0, params)
        total = softplus.sum()
        weights = self.size * softplus / total
        value, grad_weights = self.value_and_grad(weights)
        grad_softplus = (self.size / total) * (grad_weights - grad_weights @ weights / self.size)
        return value, grad_softplus * special.expit(params)


def decorrelation_objective(dataset, weights, mode, gamma, banks, standardize=True):
    """
    Full: feature pairs k<l + mask pairs k<l + all feature/mask pairs.
    Intra drops the feature/mask block; inter keeps only it; none is the
    regularizer alone. Pairs with fewer than two usable samples add 0.
    """
    objective = DecorrelationObjective(lift(dataset, banks, standardize), mode, gamma)
    return objective.value(_as_weights(weights, len(dataset)))


def softplus_inverse(weights):
    weights = np.asarray(weights, dtype=float)
    return weights + np.log(-np.expm1(-weights))


@dataclass(frozen=True, eq=False)
class WeightVector:
    """
    Per-sample weights w_i = softplus(v_i), renormalized to mean 1.

    Attributes:
        params (ndarray): free parameters v
    """

    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=float).reshape(-1)
        if params.size == 0:
            raise StructuralError('A weight vector needs at least one sample.')
        if not np.all(np.isfinite(params)):
            raise NumericalError('Weight parameters contain non-finite entries.')
        object.__setattr__(self, 'params', params)

    @classmethod
    def uniform(cls, size):
        return cls(np.full(size, UNIT_WEIGHT_PARAM))

    @classmethod
    def from_weights(cls, weights):
        weights = np.asarray(weights, dtype=float)
        if np.any(weights <= 0):
            raise StructuralError('Weights must be positive.')
        return cls(softplus_inverse(weights / weights.mean()))

    @cached_property
    def weights(self):
        # Equal parameters map to exact ones, not ones up to rounding in the mean.
        if np.all(self.params == self.params[0]):
            return np.ones_like(self.params)
        softplus = np.logaddexp(0.0, self.params)
        return softplus / softplus.mean()

    def __len__(self):
        return self.params.shape[0]


@dataclass(frozen=True)
class WeightOptConfig:
    iterations: int = DEFAULT_WEIGHT_ITERATIONS
    lr: float = DEFAULT_WEIGHT_LR
    init_scale: float = 0.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise StructuralError('Weight iterations must be >= 0.')
        if not self.lr >= 0:
            raise StructuralError('Weight learning rate must be >= 0.')


@dataclass(frozen=True, eq=False)
class WeightFit:
    """Optimizer outcome: the best weights and the objective trace."""

    weights: WeightVector
    initial_objective: float
    final_objective: float
    trace: list = field(default_factory=list)


def fit_weights(dataset, mode, gamma, opt_config, banks, rng, standardize=True):
    """
    Adam on the free parameters with analytic gradients. After each step the
    parameters are reset to softplus_inverse of the mean-1 weights. The best
    iterate is returned, so the final objective never exceeds the initial one.

    Raises:
        StructuralError: If the dataset is empty.
        NumericalError: If the objective becomes non-finite.
    """
    mode = DecorrMode(mode)
    size = len(dataset)
    if size == 0:
        raise StructuralError('Cannot optimize weights on an empty dataset.')

    params = np.full(size, UNIT_WEIGHT_PARAM)
    if opt_config.init_scale > 0:
        params = params + opt_config.init_scale * rng.standard_normal(size)

    objective = DecorrelationObjective(lift(dataset, banks, standardize), mode, gamma)
    if mode is DecorrMode.NONE and opt_config.init_scale == 0:
        logger.debug('Decorrelation mode none: keeping uniform weights')
        value = objective.value(np.ones(size))
        return WeightFit(WeightVector(params), value, value, [value])

    value, grad = objective.value_and_grad_params(params)
    if not np.isfinite(value):
        raise NumericalError(f'Initial decorrelation objective is {value}.')

    initial = best_value = value
    best_params = params
    trace = [value]
    state = AdamState.initial([params], lr=opt_config.lr)
    for iteration in range(1, opt_config.iterations + 1):
        (params,), state = adam_update([params], [grad], state)
        params = softplus_inverse(WeightVector(params).weights)
        value, grad = objective.value_and_grad_params(params)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            logger.error(
                'Decorrelation objective diverged at iteration %d (value %s, weight range %s..%s)',
                iteration, value, params.min(), params.max(),
            )
            raise NumericalError(
                f'Decorrelation objective became non-finite at iteration {iteration}.'
            )
        trace.append(value)
        if value < best_value:
            best_value, best_params = value, params
        if opt_config.log_every and iteration % opt_config.log_every == 0:
            logger.debug('weights iteration %d: objective %.6g', iteration, value)

    logger.info(
        'Weights (%s, gamma=%g): objective %.6g -> %.6g over %d iterations',
        mode.value, objective.gamma, initial, best_value, opt_config.iterations,
    )
    return WeightFit(WeightVector(best_params), initial, best_value, trace)


def optimize_weights(dataset, mode, gamma, opt_config, banks, rng, standardize=True):
    """Decorrelating weights for ``dataset``; see fit_weights."""
    return fit_weights(dataset, mode, gamma, opt_config, banks, rng, standardize).weights


def write_weights_csv(weights, path):
    """Write columns sample_index, weight."""
    values = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights)
    frame = pd.DataFrame({'sample_index': np.arange(values.shape[0]), 'weight': values})
    frame.to_csv(path, index=False)
    logger.info('Wrote %d weights to %s', values.shape[0], path)
