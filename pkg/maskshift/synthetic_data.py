"""
Synthetic complete-feature data.

Features come from a single Gaussian (general or diagonal covariance) or a
three-component Gaussian mixture; labels follow the linear process
Y = a0 + a^T X + eps with the noise scale set from a signal-to-noise ratio.
All generators take an explicit numpy Generator and never touch global state.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
import pandas as pd

from .exceptions import DegenerateSignalError, StructuralError
from .linalg import cholesky_with_jitter

logger = logging.getLogger(__name__)

DEFAULT_SNR = 10.0
MIXTURE_COMPONENTS = 3
DIAGONAL_RANGE = (1e-2, 1e-1)


class FeatureKind(str, Enum):
    GAUSSIAN = 'gaussian'
    GAUSSIAN_IND = 'gaussian-ind'
    GAUSSIAN_MIX = 'gaussian-mix'


@dataclass(frozen=True, eq=False)
class FeatureSpec:
    """
    Parameters of the complete-feature distribution p(x).

    Attributes:
        kind (FeatureKind): generator family
        means (ndarray): (K, n) component means
        covariances (ndarray): (K, n, n) component covariances
        proportions (ndarray): (K,) mixture proportions

    Invariants:
        - every covariance is symmetric PSD
        - proportions are nonnegative and sum to 1
        - GAUSSIAN_IND covariances are diagonal
    """

    kind: FeatureKind
    means: np.ndarray
    covariances: np.ndarray
    proportions: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covariances = np.asarray(self.covariances, dtype=float)
        if covariances.ndim == 2:
            covariances = covariances[None]
        proportions = np.atleast_1d(np.asarray(self.proportions, dtype=float))
        object.__setattr__(self, 'kind', FeatureKind(self.kind))
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'covariances', covariances)
        object.__setattr__(self, 'proportions', proportions)

        n_components, n = means.shape
        if n < 1:
            raise StructuralError('Feature dimension must be at least 1.')
        if covariances.shape != (n_components, n, n) or proportions.shape != (n_components,):
            raise StructuralError(
                f'Inconsistent shapes: means {means.shape}, covariances '
                f'{covariances.shape}, proportions {proportions.shape}.'
            )
        if np.any(proportions < 0) or not np.isclose(proportions.sum(), 1.0, rtol=0, atol=1e-12):
            raise StructuralError('Mixture proportions must be nonnegative and sum to 1.')

        for sigma in covariances:
            if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
                raise StructuralError('Covariance matrices must be symmetric.')
            eigenvalues = np.linalg.eigvalsh(sigma)
            if eigenvalues[0] < -1e-8 * max(1.0, abs(eigenvalues[-1])):
                raise StructuralError('Covariance matrices must be positive semidefinite.')
            if self.kind is FeatureKind.GAUSSIAN_IND and np.any(sigma - np.diag(np.diag(sigma))):
                raise StructuralError('gaussian-ind covariances must be diagonal.')

    @property
    def n(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    def component(self, index):
        return self.means[index], self.covariances[index]

    def mean(self):
        return self.proportions @ self.means

    @cached_property
    def duplicate_columns(self):
        """
        Map j -> i (i < j) for coordinates that equal an earlier one almost
        surely: same mean and same covariance row in every component.
        """
        duplicates = {}
        for j in range(1, self.n):
            for i in range(j):
                if i in duplicates:
                    continue
                if (np.array_equal(self.means[:, i], self.means[:, j])
                        and np.array_equal(self.covariances[:, i], self.covariances[:, j])):
                    duplicates[j] = i
                    break
        return duplicates

    @cached_property
    def cholesky_factors(self):
        return tuple(
            cholesky_with_jitter(sigma, what=f'component {k} covariance')
            for k, sigma in enumerate(self.covariances)
        )


@dataclass(frozen=True, eq=False)
class LabelModel:
    """
    Linear label process Y = intercept + coef^T X + eps, eps ~ N(0, noise_std^2).
    """

    intercept: float
    coef: np.ndarray
    noise_std: float

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float).reshape(-1)
        object.__setattr__(self, 'coef', coef)
        object.__setattr__(self, 'intercept', float(self.intercept))
        object.__setattr__(self, 'noise_std', float(self.noise_std))
        if not (np.isfinite(self.intercept) and np.all(np.isfinite(coef))):
            raise StructuralError('Label coefficients must be finite.')
        if not (np.isfinite(self.noise_std) and self.noise_std >= 0):
            raise StructuralError('Noise standard deviation must be finite and >= 0.')

    def signal(self, features):
        return self.intercept + np.asarray(features, dtype=float) @ self.coef


@dataclass(frozen=True, eq=False)
class CompleteDataset:
    """
    Fully observed samples before masking.

    Attributes:
        features (ndarray): (N, n)
        labels (ndarray): (N,)
        components (ndarray): (N,) index of the mixture component of each row
    """

    features: np.ndarray
    labels: np.ndarray
    components: np.ndarray = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise StructuralError(
                f'Feature matrix {features.shape} and label vector {labels.shape} disagree.'
            )
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(labels))):
            raise StructuralError('Complete datasets must be finite.')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)
        if self.components is None:
            object.__setattr__(self, 'components', np.zeros(labels.shape[0], dtype=int))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n(self):
        return self.features.shape[1]


def _draw_gaussian_component(n, rng, diagonal):
    mean = rng.standard_normal(n)
    low, high = DIAGONAL_RANGE
    if diagonal:
        covariance = np.diag(rng.uniform(low, high, size=n))
    else:
        rank = (7 * n) // 10
        loading = rng.standard_normal((n, rank))
        covariance = loading @ loading.T + np.diag(rng.uniform(low, high, size=n))
        covariance = 0.5 * (covariance + covariance.T)
    return mean, covariance


def make_gaussian_spec(n, kind, rng):
    """
    Draw a single-Gaussian feature spec.

    Means are standard normal. The general kind uses Sigma = B B^T + D with
    B in R^{n x floor(0.7n)} standard normal and D diagonal uniform on
    [1e-2, 1e-1]; the independent kind keeps only D.

    Raises:
        StructuralError: If n < 1 or the kind is a mixture.
    """
    kind = FeatureKind(kind)
    if n < 1:
        raise StructuralError('Feature dimension must be at least 1.')
    if kind is FeatureKind.GAUSSIAN_MIX:
        raise StructuralError('Use make_mixture_spec for mixtures.')
    mean, covariance = _draw_gaussian_component(n, rng, diagonal=kind is FeatureKind.GAUSSIAN_IND)
    return FeatureSpec(kind, mean[None], covariance[None], np.ones(1))


def make_mixture_spec(n, rng, n_components=MIXTURE_COMPONENTS):
    """
    Draw a Gaussian-mixture spec; each component is drawn like the general
    Gaussian and proportions are uniform on [0, 1) then normalized.
    """
    if n < 1:
        raise StructuralError('Feature dimension must be at least 1.')
    components = [_draw_gaussian_component(n, rng, diagonal=False) for _ in range(n_components)]
    raw = rng.uniform(0.0, 1.0, size=n_components)
    proportions = raw / raw.sum()
    return FeatureSpec(
        FeatureKind.GAUSSIAN_MIX,
        np.stack([mean for mean, _ in components]),
        np.stack([covariance for _, covariance in components]),
        proportions,
    )


def make_example_spec(n):
    """
    Zero-mean Gaussian with independent standard-normal entries except
    X2 = X1 (unit covariance between the first two coordinates).
    """
    if n < 2:
        raise StructuralError('The duplicated-feature example needs n >= 2.')
    covariance = np.eye(n)
    covariance[0, 1] = covariance[1, 0] = 1.0
    return FeatureSpec(FeatureKind.GAUSSIAN, np.zeros((1, n)), covariance[None], np.ones(1))


def signal_variance(spec, coef):
    """Var(coef^T X) under the feature distribution, by the law of total variance."""
    coef = np.asarray(coef, dtype=float)
    if spec.n_components == 1:
        return float(coef @ spec.covariances[0] @ coef)
    within = np.einsum('i,kij,j->k', coef, spec.covariances, coef)
    shifts = spec.means @ coef
    between_mean = float(spec.proportions @ shifts)
    return float(spec.proportions @ (within + shifts ** 2) - between_mean ** 2)


def make_label_model(spec, snr, rng, coef_scale=1.0):
    """
    Draw label coefficients and set the noise so that Var(signal)/Var(noise) = snr.

    Raises:
        StructuralError: If snr is not positive.
        DegenerateSignalError: If Var(a^T X) is zero.
    """
    if not snr > 0:
        raise StructuralError('Signal-to-noise ratio must be positive.')
    intercept = coef_scale * rng.standard_normal()
    coef = coef_scale * rng.standard_normal(spec.n)
    variance = signal_variance(spec, coef)
    if not variance > 0:
        raise DegenerateSignalError(
            'Var(a^T X) is zero; the noise scale is undefined for this spec.'
        )
    return LabelModel(intercept, coef, np.sqrt(variance / snr))


def sample_features(spec, size, rng):
    """
    Draw rows from p(x). The component of each row is drawn first, then the
    rows of each component are filled by Cholesky sampling. Coordinates that
    duplicate an earlier one are copied from it, so X2 == X1 holds exactly
    for the duplicated-feature source.

    Returns:
        tuple: (features (size, n), component index per row)
    """
    if size < 0:
        raise StructuralError('Sample size must be >= 0.')
    components = rng.choice(spec.n_components, size=size, p=spec.proportions)
    features = np.empty((size, spec.n))
    for k, factor in enumerate(spec.cholesky_factors):
        rows = np.flatnonzero(components == k)
        noise = rng.standard_normal((rows.size, spec.n))
        features[rows] = spec.means[k] + noise @ factor.T
    for target, source in spec.duplicate_columns.items():
        features[:, target] = features[:, source]
    return features, components


def sample_dataset(spec, label_model, size, rng):
    """Draw a complete dataset of ``size`` rows with linear labels."""
    if label_model.coef.shape[0] != spec.n:
        raise StructuralError(
            f'Label model has {label_model.coef.shape[0]} coefficients for {spec.n} features.'
        )
    features, components = sample_features(spec, size, rng)
    noise = label_model.noise_std * rng.standard_normal(size)
    labels = label_model.signal(features) + noise
    return CompleteDataset(features, labels, components)


def feature_columns(n):
    return [f'x_{i}' for i in range(1, n + 1)]


def write_dataset_csv(dataset, path):
    """Write columns x_1..x_n, y in row order."""
    frame = pd.DataFrame(dataset.features, columns=feature_columns(dataset.n))
    frame['y'] = dataset.labels
    frame.to_csv(path, index=False)
    logger.info('Wrote %d complete rows to %s', len(dataset), path)
