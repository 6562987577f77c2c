"""
Mask-conditioned linear predictor.

The head is linear in the zero-imputed features,

    yhat = phi_0(m) + sum_i phi_i(m) * (x * m)_i,

and the coefficient map phi(m) comes either from an MLP on the augmented mask
[1; m] (linear head) or from a dense third-order tensor theta with
phi_k(m) = m_k * sum_ij theta_ijk m_i m_j and x_0 = m_0 = 1 (quadratic head).
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from itertools import product
from typing import NamedTuple

import numpy as np
import pandas as pd

from .exceptions import NumericalError, StructuralError
from .nn_core import (
    AdamState,
    DenseLayer,
    MlpParams,
    adam_update,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_trace,
    weighted_mse,
)

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = (256, 256)
DEFAULT_EPOCHS = 1000
DEFAULT_BATCH_SIZE = 64
DEFAULT_LR = 1e-3
QUADRATIC_INIT_STD = 0.01
CHECKPOINT_VERSION = 1


class HeadKind(str, Enum):
    LINEAR = 'linear'
    QUADRATIC = 'quadratic'


class Split(str, Enum):
    TRAIN = 'train'
    TEST = 'test'


@dataclass(frozen=True, eq=False)
class PredictorModel:
    """
    Parameters of the predictor.

    Attributes:
        head (HeadKind): how phi(m) is computed
        n (int): feature dimension
        phi_net (MlpParams): linear head, maps [1; m] to phi_0..phi_n
        theta (ndarray): quadratic head, (n+1, n+1, n+1)
    """

    head: HeadKind
    n: int
    phi_net: MlpParams = None
    theta: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, 'head', HeadKind(self.head))
        width = self.n + 1
        if self.head is HeadKind.LINEAR:
            if self.phi_net is None:
                raise StructuralError('A linear head needs a phi network.')
            if self.phi_net.in_width != width or self.phi_net.out_width != width:
                raise StructuralError(
                    f'phi network must map {width} -> {width}, got '
                    f'{self.phi_net.in_width} -> {self.phi_net.out_width}.'
                )
        else:
            if self.theta is None:
                raise StructuralError('A quadratic head needs a theta tensor.')
            theta = np.asarray(self.theta, dtype=float)
            if theta.shape != (width,) * 3:
                raise StructuralError(f'theta must be {(width,) * 3}, got {theta.shape}.')
            if not np.all(np.isfinite(theta)):
                raise NumericalError('theta contains non-finite entries.')
            object.__setattr__(self, 'theta', theta)

    def arrays(self):
        return self.phi_net.arrays() if self.head is HeadKind.LINEAR else [self.theta]

    def with_arrays(self, arrays):
        if self.head is HeadKind.LINEAR:
            return PredictorModel(self.head, self.n, phi_net=self.phi_net.with_arrays(arrays))
        (theta,) = arrays
        return PredictorModel(self.head, self.n, theta=theta)


class TrainedPredictor(NamedTuple):
    model: PredictorModel
    trace: list


class LrSchedule(str, Enum):
    CONSTANT = 'constant'
    COSINE = 'cosine'


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        schedule (LrSchedule): constant lr, or cosine decay from lr towards
            0 over the epochs (set once per epoch)
    """

    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    log_every: int = 100
    schedule: LrSchedule = LrSchedule.CONSTANT

    def __post_init__(self):
        object.__setattr__(self, 'schedule', LrSchedule(self.schedule))
        if self.epochs < 0:
            raise StructuralError('epochs must be >= 0.')
        if self.batch_size < 1:
            raise StructuralError('batch_size must be >= 1.')
        if not self.lr >= 0:
            raise StructuralError('Learning rate must be >= 0.')

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch."""
        if self.schedule is LrSchedule.CONSTANT:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * (epoch - 1) / self.epochs))


def init_predictor(n, head, rng, hidden=DEFAULT_HIDDEN):
    """Fresh model: Glorot-uniform phi network, or small normal theta."""
    head = HeadKind(head)
    if n < 1:
        raise StructuralError('Feature dimension must be at least 1.')
    if head is HeadKind.LINEAR:
        return PredictorModel(head, n, phi_net=init_mlp([n + 1, *hidden, n + 1], rng))
    theta = QUADRATIC_INIT_STD * rng.standard_normal((n + 1,) * 3)
    return PredictorModel(head, n, theta=theta)


def augment(values):
    """Prepend the constant coordinate: [1; v] per row."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    return np.concatenate([np.ones((values.shape[0], 1)), values], axis=1)


def _check_inputs(model, features, masks):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    if features.shape != masks.shape or features.shape[1] != model.n:
        raise StructuralError(
            f'Model has n={model.n}; got features {features.shape}, masks {masks.shape}.'
        )
    return features, masks


def quadratic_coefficients(theta, augmented_masks):
    """phi_k = m_k * sum_ij theta_ijk m_i m_j for each row of [1; m]."""
    inner = np.einsum('bi,bj,ijk->bk', augmented_masks, augmented_masks, theta)
    return inner * augmented_masks


def head_coefficients(model, masks):
    """phi_0..phi_n for each mask row, shape (B, n+1)."""
    augmented_masks = augment(masks)
    if augmented_masks.shape[1] != model.n + 1:
        raise StructuralError(f'Masks have width {augmented_masks.shape[1] - 1}, model n={model.n}.')
    if model.head is HeadKind.LINEAR:
        return mlp_forward(model.phi_net, augmented_masks)
    return quadratic_coefficients(model.theta, augmented_masks)


def predict_batch(model, features, masks):
    """Predictions for rows of features (imputed or not) and masks."""
    features, masks = _check_inputs(model, features, masks)
    coefficients = head_coefficients(model, masks)
    return np.sum(coefficients * augment(features * masks), axis=1)


def predict(model, x, m):
    """Prediction for one sample; missing coordinates of x never reach the head."""
    return float(predict_batch(model, np.asarray(x)[None], np.asarray(m)[None])[0])


def predict_dataset(model, dataset):
    return predict_batch(model, dataset.features, dataset.masks)


def quadratic_terms(features, masks):
    """
    The regressors of the quadratic head, x_k m_i m_j m_k with x_0 = m_0 = 1,
    flattened in theta.ravel() order: (B, (n+1)**3).
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    masks = np.atleast_2d(np.asarray(masks, dtype=float))
    if features.shape != masks.shape:
        raise StructuralError(f'Features {features.shape} and masks {masks.shape} differ.')
    augmented_masks = augment(masks)
    observed_features = augment(features) * augmented_masks
    terms = np.einsum('bi,bj,bk->bijk', augmented_masks, augmented_masks, observed_features)
    return terms.reshape(terms.shape[0], -1)


def quadratic_predict(theta, x, m):
    """
    sum_ijk theta_ijk x_k m_i m_j m_k with x_0 = m_0 = 1.

    Works on any numeric element type, including Fraction object arrays.
    """
    theta = np.asarray(theta)
    x = [1, *x]
    m = [1, *m]
    if theta.shape != (len(x),) * 3 or len(m) != len(x):
        raise StructuralError(f'theta shape {theta.shape} does not fit n={len(x) - 1}.')
    total = 0
    for i, j, k in product(range(len(x)), repeat=3):
        coefficient = theta[i, j, k]
        if coefficient:
            total += coefficient * x[k] * m[i] * m[j] * m[k]
    return total


def predictor_loss_and_grad(model, features, masks, labels, weights):
    """
    Weighted squared loss of a batch and its gradient in model.arrays() order.
    """
    features, masks = _check_inputs(model, features, masks)
    augmented_features = augment(features * masks)
    augmented_masks = augment(masks)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)

    if model.head is HeadKind.LINEAR:
        coefficients, trace = mlp_forward_trace(model.phi_net, augmented_masks)
    else:
        coefficients = quadratic_coefficients(model.theta, augmented_masks)
    predictions = np.sum(coefficients * augmented_features, axis=1)
    loss, grad_predictions = weighted_mse(predictions, labels, weights)
    grad_coefficients = grad_predictions[:, None] * augmented_features

    if model.head is HeadKind.LINEAR:
        grads, _ = mlp_backward(model.phi_net, trace, grad_coefficients)
    else:
        grads = [
            np.einsum(
                'bi,bj,bk->ijk',
                augmented_masks,
                augmented_masks,
                grad_coefficients * augmented_masks,
            )
        ]
    return loss, grads


def predictor_gradient_check(model, features, masks, labels, weights, h=1e-5, eps=1e-6):
    """Max relative error between analytic and central-difference gradients."""
    if h <= 0:
        raise StructuralError('Finite-difference step h must be positive.')
    _, analytic = predictor_loss_and_grad(model, features, masks, labels, weights)
    arrays = [array.copy() for array in model.arrays()]

    def loss_at():
        loss, _ = predictor_loss_and_grad(model.with_arrays(arrays), features, masks, labels, weights)
        return loss

    worst = 0.0
    for array, grad in zip(arrays, analytic):
        for position in np.ndindex(array.shape):
            original = array[position]
            array[position] = original + h
            plus = loss_at()
            array[position] = original - h
            minus = loss_at()
            array[position] = original
            finite_difference = (plus - minus) / (2.0 * h)
            error = abs(grad[position] - finite_difference) / (
                abs(grad[position]) + abs(finite_difference) + eps
            )
            worst = max(worst, error)
    return worst


def train_predictor(model, dataset, weights, config, rng):
    """
    Mini-batch Adam on (1 / sum w) sum_i w_i (y_i - yhat_i)^2.

    Args:
        model (PredictorModel): starting parameters
        dataset (MaskedDataset): training data
        weights: per-sample weights (array, WeightVector or None for uniform)
        config (TrainConfig): epochs, batch size, learning rate
        rng (numpy.random.Generator): shuffle stream

    Returns:
        TrainedPredictor: model and per-epoch weighted mean batch loss

    Raises:
        NumericalError: If a batch loss becomes non-finite.
    """
    size = len(dataset)
    if weights is None:
        weights = np.ones(size)
    elif hasattr(weights, 'weights'):
        weights = weights.weights
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.shape[0] != size:
        raise StructuralError(f'Got {weights.shape[0]} weights for {size} samples.')
    if config.epochs == 0 or size == 0:
        return TrainedPredictor(model, [])

    state = AdamState.initial(model.arrays(), lr=config.lr)
    trace = []
    for epoch in range(1, config.epochs + 1):
        state = replace(state, lr=config.lr_at(epoch))
        order = rng.permutation(size)
        weighted_loss = 0.0
        total_weight = 0.0
        for start in range(0, size, config.batch_size):
            rows = order[start:start + config.batch_size]
            batch_weights = weights[rows]
            batch_total = float(batch_weights.sum())
            if batch_total <= 0.0:
                continue
            loss, grads = predictor_loss_and_grad(
                model, dataset.features[rows], dataset.masks[rows], dataset.labels[rows], batch_weights
            )
            if not np.isfinite(loss):
                logger.error('Predictor loss is %s at epoch %d (batch at %d)', loss, epoch, start)
                raise NumericalError(f'Predictor loss became non-finite at epoch {epoch}.')
            arrays, state = adam_update(model.arrays(), grads, state)
            model = model.with_arrays(arrays)
            weighted_loss += loss * batch_total
            total_weight += batch_total

        epoch_loss = weighted_loss / total_weight if total_weight else float('nan')
        trace.append(epoch_loss)
        if config.log_every and epoch % config.log_every == 0:
            logger.debug('epoch %d: loss %.6g', epoch, epoch_loss)

    logger.info(
        'Trained %s head for %d epochs: loss %.6g -> %.6g',
        model.head.value, config.epochs, trace[0], trace[-1],
    )
    return TrainedPredictor(model, trace)


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    """
    Finite-support problem for exact population losses.

    Attributes:
        features (tuple): ((x, probability), ...)
        train_masks (tuple): ((m, probability), ...)
        test_masks (tuple): ((m, probability), ...)
        label (callable): exact map x -> y
        exact (bool): probabilities and arithmetic are Fractions
    """

    features: tuple
    train_masks: tuple
    test_masks: tuple
    label: object
    exact: bool = True

    def __post_init__(self):
        for name in ('features', 'train_masks', 'test_masks'):
            support = getattr(self, name)
            if not support:
                raise StructuralError(f'The {name} support is empty.')
            total = sum(probability for _, probability in support)
            balanced = total == 1 if self.exact else np.isclose(float(total), 1.0)
            if not balanced:
                raise StructuralError(f'The {name} probabilities sum to {total}, not 1.')

    def masks(self, which):
        return self.train_masks if Split(which) is Split.TRAIN else self.test_masks


def enumerate_population_loss(predictor, instance, which):
    """
    Exact E[(y(x) - yhat(x * m, m))^2] over the instance's feature support and
    the train or test mask support.

    ``predictor`` is either a PredictorModel or a theta tensor (possibly of
    Fractions) for the quadratic head.
    """
    total = Fraction(0) if instance.exact else 0.0
    for x, feature_probability in instance.features:
        target = instance.label(x)
        for m, mask_probability in instance.masks(which):
            imputed = tuple(value * observed for value, observed in zip(x, m))
            if isinstance(predictor, PredictorModel):
                estimate = predict(predictor, imputed, m)
            else:
                estimate = quadratic_predict(predictor, imputed, m)
            total += feature_probability * mask_probability * (target - estimate) ** 2
    return total


def save_model(model, path):
    """Write a versioned .npz checkpoint of the head kind, n and parameters."""
    payload = {
        'version': np.array(CHECKPOINT_VERSION),
        'head': np.array(model.head.value),
        'n': np.array(model.n),
    }
    for index, array in enumerate(model.arrays()):
        payload[f'param_{index}'] = array
    np.savez(path, **payload)
    logger.info('Saved %s predictor checkpoint to %s', model.head.value, path)


def load_model(path):
    """
    Raises:
        StructuralError: On an unknown checkpoint version.
    """
    with np.load(path, allow_pickle=False) as checkpoint:
        version = int(checkpoint['version'])
        if version != CHECKPOINT_VERSION:
            raise StructuralError(f'Unsupported checkpoint version {version}.')
        head = HeadKind(str(checkpoint['head']))
        n = int(checkpoint['n'])
        count = sum(1 for key in checkpoint.files if key.startswith('param_'))
        arrays = [checkpoint[f'param_{index}'] for index in range(count)]
    if head is HeadKind.QUADRATIC:
        return PredictorModel(head, n, theta=arrays[0])
    layers = tuple(DenseLayer(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2))
    return PredictorModel(head, n, phi_net=MlpParams(layers))


def write_loss_trace(trace, path):
    """Write columns epoch, loss with epochs numbered from 1."""
    frame = pd.DataFrame({'epoch': np.arange(1, len(trace) + 1), 'loss': trace})
    frame.to_csv(path, index=False)
