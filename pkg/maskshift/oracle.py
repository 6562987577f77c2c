"""
Analytic ground truth for the benchmarks.

- conditional moments of a Gaussian given the observed block
- the optimal predictor E[Y | x_m, m] for Gaussian and Gaussian-mixture
  features with linear labels
- the closed-form coefficient map of the duplicated-feature example
- the discrete instance on which a training-optimal quadratic predictor
  fails under a mask shift
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from itertools import product

import numpy as np
from scipy import linalg, special, stats

from .exceptions import StructuralError
from .linalg import cho_solve_lower, cholesky_with_jitter, log_det_from_factor
from .predictor import DiscreteInstance

logger = logging.getLogger(__name__)

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class ConditionalMoments:
    """
    Moments of X_missing given x_observed.

    Attributes:
        mean (ndarray): E[X_mbar | x_m]
        covariance (ndarray): Sigma_mbar,mbar - Sigma_mbar,m Sigma_mm^-1 Sigma_m,mbar
        observed (ndarray): indices of the conditioning block
        missing (ndarray): indices of the conditioned block
    """

    mean: np.ndarray
    covariance: np.ndarray
    observed: np.ndarray
    missing: np.ndarray


def split_mask(m):
    m = np.asarray(m)
    return np.flatnonzero(m == 1), np.flatnonzero(m == 0)


def gaussian_conditional_moments(mu, sigma, x, m):
    """
    Condition N(mu, sigma) on the observed entries of ``x``.

    ``x`` is the full-length (possibly zero-imputed) vector; only x[m == 1] is read.

    Raises:
        NumericalError: If the observed block cannot be factored.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    x = np.asarray(x, dtype=float)
    if not (mu.shape[0] == sigma.shape[0] == sigma.shape[1] == x.shape[0] == len(m)):
        raise StructuralError('Mean, covariance, x and mask dimensions disagree.')

    observed, missing = split_mask(m)
    if observed.size == 0:
        return ConditionalMoments(mu.copy(), sigma.copy(), observed, missing)

    factor = cholesky_with_jitter(sigma[np.ix_(observed, observed)], what='observed covariance block')
    cross = sigma[np.ix_(missing, observed)]
    mean = mu[missing] + cross @ cho_solve_lower(factor, x[observed] - mu[observed])
    covariance = sigma[np.ix_(missing, missing)] - cross @ cho_solve_lower(factor, cross.T)
    return ConditionalMoments(mean, 0.5 * (covariance + covariance.T), observed, missing)


def _component_terms(mean, covariance, coef, rows, observed, missing):
    """
    Per-row linear-signal prediction and observed-block log density for one
    Gaussian component.
    """
    if observed.size == 0:
        prediction = np.full(rows.shape[0], float(coef @ mean))
        return prediction, np.zeros(rows.shape[0])

    factor = cholesky_with_jitter(covariance[np.ix_(observed, observed)], what='observed covariance block')
    centered = (rows[:, observed] - mean[observed]).T
    whitened = linalg.solve_triangular(factor, centered, lower=True)
    solved = linalg.solve_triangular(factor.T, whitened, lower=False)
    conditional_mean = mean[missing][:, None] + covariance[np.ix_(missing, observed)] @ solved

    prediction = rows[:, observed] @ coef[observed] + coef[missing] @ conditional_mean
    log_density = -0.5 * (
        observed.size * LOG_TWO_PI + log_det_from_factor(factor) + np.sum(whitened ** 2, axis=0)
    )
    return prediction, log_density


def _mask_groups(masks):
    patterns, inverse = np.unique(masks, axis=0, return_inverse=True)
    for index, pattern in enumerate(patterns):
        yield pattern, np.flatnonzero(inverse.reshape(-1) == index)


def optimal_predict_batch(spec, label_model, features, masks):
    """
    E[Y | x_m, m] for every row. Rows sharing a mask share one factorization.

    Mixture responsibilities are computed in log space; an empty mask falls
    back to the mixture proportions.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    if features.shape != masks.shape or features.shape[1] != spec.n:
        raise StructuralError(f'Spec has n={spec.n}; got {features.shape} and {masks.shape}.')

    coef = label_model.coef
    predictions = np.empty(features.shape[0])
    active = np.flatnonzero(spec.proportions > 0)
    log_proportions = np.log(spec.proportions[active])
    for pattern, rows in _mask_groups(masks):
        observed, missing = split_mask(pattern)
        block = features[rows]
        terms = [
            _component_terms(spec.means[k], spec.covariances[k], coef, block, observed, missing)
            for k in active
        ]
        component_predictions = np.stack([prediction for prediction, _ in terms])
        log_weights = log_proportions[:, None] + np.stack([density for _, density in terms])
        responsibilities = np.exp(log_weights - special.logsumexp(log_weights, axis=0))
        predictions[rows] = np.sum(responsibilities * component_predictions, axis=0)
    return label_model.intercept + predictions


def optimal_predict(spec, label_model, x, m):
    """Optimal prediction for one sample; ``x`` is full-length, read only where m == 1."""
    return float(optimal_predict_batch(spec, label_model, np.asarray(x)[None], np.asarray(m)[None])[0])


def optimal_predict_direct(spec, label_model, x, m):
    """
    Mixture prediction with responsibilities from plain densities. Only
    meaningful when no density underflows.
    """
    x = np.asarray(x, dtype=float)
    observed, missing = split_mask(m)
    weights = []
    signals = []
    for k in range(spec.n_components):
        mean, covariance = spec.component(k)
        moments = gaussian_conditional_moments(mean, covariance, x, m)
        signals.append(
            x[observed] @ label_model.coef[observed] + label_model.coef[missing] @ moments.mean
        )
        if observed.size:
            density = stats.multivariate_normal(
                mean[observed], covariance[np.ix_(observed, observed)]
            ).pdf(x[observed])
        else:
            density = 1.0
        weights.append(spec.proportions[k] * density)
    weights = np.asarray(weights) / np.sum(weights)
    return float(label_model.intercept + weights @ np.asarray(signals))


def optimal_residual_variance(spec, label_model, m):
    """
    alpha_mbar^T Sigma_mbar,mbar|m alpha_mbar + sigma^2 for a single Gaussian.

    Raises:
        StructuralError: For mixture specs.
    """
    if spec.n_components != 1:
        raise StructuralError('The analytic residual variance needs a single Gaussian.')
    mean, covariance = spec.component(0)
    moments = gaussian_conditional_moments(mean, covariance, mean, m)
    coef = label_model.coef[moments.missing]
    return float(coef @ moments.covariance @ coef + label_model.noise_std ** 2)


def example_phi(m, alpha, means):
    """
    Closed-form phi_0..phi_n of the optimal predictor when X_1 = X_2 and the
    other entries are independent, for Y = sum_i alpha_i X_i.
    """
    m = np.asarray(m, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    means = np.asarray(means, dtype=float)
    if m.shape[0] < 2 or not (m.shape == alpha.shape == means.shape):
        raise StructuralError('example_phi needs matching m, alpha, means with n >= 2.')
    missing = 1.0 - m
    phi = np.empty(m.shape[0] + 1)
    phi[0] = missing[0] * missing[1] * (alpha[0] * means[0] + alpha[1] * means[1]) + float(
        np.sum(missing[2:] * alpha[2:] * means[2:])
    )
    phi[1] = (alpha[0] + alpha[1] * missing[1]) * m[0]
    phi[2] = (alpha[1] + alpha[0] * missing[0]) * m[1]
    phi[3:] = alpha[2:] * m[2:]
    return phi


def _fraction_tensor(slices):
    """Stack printed theta[:, :, k] matrices (rows i, columns j) into theta[i, j, k]."""
    theta = np.empty((3, 3, 3), dtype=object)
    for k, matrix in enumerate(slices):
        for i, j in product(range(3), repeat=2):
            theta[i, j, k] = Fraction(matrix[i][j])
    return theta


def counterexample_instance():
    """
    Two binary features, Y = X_1 + 2 X_2, training masks (0,1) and (1,0) with
    probability 1/2 each, independent Bernoulli(1/2) test masks.

    Returns:
        tuple: (DiscreteInstance, theta_star, theta_hat). theta_star is the
            optimal predictor; theta_hat matches it on the training masks only.
    """
    half = Fraction(1, 2)
    quarter = Fraction(1, 4)
    instance = DiscreteInstance(
        features=tuple(((x1, x2), quarter) for x1, x2 in product((0, 1), repeat=2)),
        train_masks=(((0, 1), half), ((1, 0), half)),
        test_masks=tuple(((m1, m2), quarter) for m1, m2 in product((0, 1), repeat=2)),
        label=lambda x: x[0] + 2 * x[1],
        exact=True,
    )
    theta_star = _fraction_tensor([
        [['3/2', '-1/2', '-1'], [0, 0, 0], [0, 0, 0]],
        [[0, 1, 0], [0, 0, 0], [0, 0, 0]],
        [[0, 0, 2], [0, 0, 0], [0, 0, 0]],
    ])
    theta_hat = _fraction_tensor([
        [['3/2', '-1', '-3/2'], ['-1/2', 1, 0], ['-1/2', 0, 1]],
        [[0, '3/2', '1/2'], ['1/2', -1, 0], ['1/2', 0, -1]],
        [[0, 1, 2], [1, 1, 1], [0, 1, 0]],
    ])
    return instance, theta_star, theta_hat
