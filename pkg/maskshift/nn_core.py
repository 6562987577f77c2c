"""
Numeric substrate for the predictor and the weight optimizer.

This module provides:
- MlpParams: a stack of dense layers with ReLU between them and an affine
  output layer
- forward evaluation with a trace, and hand-written reverse-mode gradients
- the weighted squared loss normalized by the total batch weight
- an Adam optimizer that works on any list of numpy arrays
- a central-difference gradient check used as a test oracle

All functions are pure: they return new parameter and optimizer values and
never mutate their inputs.
"""

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .exceptions import DegenerateBatchError, NumericalError, StructuralError

logger = logging.getLogger(__name__)

ACTIVATION_RELU = 'relu'

# Adam defaults (only the learning rate is fixed by the training protocol)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """
    One affine layer.

    Attributes:
        weight (ndarray): (out, in) matrix
        bias (ndarray): (out,) vector
    """

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_width(self):
        return self.weight.shape[1]

    @property
    def out_width(self):
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Parameters of a multi-layer perceptron.

    Hidden layers are followed by a rectifier; the last layer is affine.

    Invariants:
        - adjacent layer widths chain
        - every entry is finite
    """

    layers: tuple
    activation: str = ACTIVATION_RELU

    def __post_init__(self):
        if not self.layers:
            raise StructuralError('An MLP needs at least one layer.')
        if self.activation != ACTIVATION_RELU:
            raise StructuralError(f'Unsupported activation "{self.activation}".')

        for layer in self.layers:
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise StructuralError(
                    f'Layer weight {layer.weight.shape} and bias {layer.bias.shape} '
                    'do not match.'
                )
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NumericalError('MLP parameters contain non-finite entries.')

        for previous, following in zip(self.layers, self.layers[1:]):
            if following.in_width != previous.out_width:
                raise StructuralError(
                    f'Layer widths do not chain: {previous.out_width} -> {following.in_width}.'
                )

    @property
    def in_width(self):
        return self.layers[0].in_width

    @property
    def out_width(self):
        return self.layers[-1].out_width

    @property
    def widths(self):
        return [self.in_width] + [layer.out_width for layer in self.layers]

    def arrays(self):
        """Flat parameter list in the order [W0, b0, W1, b1, ...]."""
        flat = []
        for layer in self.layers:
            flat.extend((layer.weight, layer.bias))
        return flat

    def with_arrays(self, arrays):
        """Build parameters of the same shape from a flat array list."""
        if len(arrays) != 2 * len(self.layers):
            raise StructuralError(
                f'Expected {2 * len(self.layers)} arrays, got {len(arrays)}.'
            )
        layers = tuple(
            DenseLayer(np.asarray(arrays[2 * i], dtype=float), np.asarray(arrays[2 * i + 1], dtype=float))
            for i in range(len(self.layers))
        )
        return MlpParams(layers, self.activation)

    def copy(self):
        return self.with_arrays([array.copy() for array in self.arrays()])


class ForwardTrace(NamedTuple):
    """Values kept by the forward pass for the backward pass."""

    layer_inputs: list
    pre_activations: list


@dataclass(frozen=True, eq=False)
class Batch:
    """Regression samples: inputs (B, in) and scalar targets (B,)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if inputs.shape[0] != targets.shape[0]:
            raise StructuralError(
                f'Batch has {inputs.shape[0]} inputs but {targets.shape[0]} targets.'
            )
        if targets.shape[0] == 0:
            raise StructuralError('Batch is empty.')
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'targets', targets)

    def __len__(self):
        return self.targets.shape[0]


@dataclass(frozen=True, eq=False)
class AdamState:
    """
    Adam optimizer state for a list of parameter arrays.

    Attributes:
        first_moments (tuple): running means of the gradients
        second_moments (tuple): running means of the squared gradients
        step (int): number of updates applied so far
        lr (float): learning rate
        beta1, beta2 (float): moment decay rates
        eps (float): denominator stabilizer
    """

    first_moments: tuple
    second_moments: tuple
    step: int = 0
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self):
        if self.step < 0:
            raise StructuralError('Adam step counter must be >= 0.')
        if len(self.first_moments) != len(self.second_moments):
            raise StructuralError('Adam moment lists differ in length.')

    @classmethod
    def initial(cls, arrays, lr=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        """Zero moments shaped like ``arrays``."""
        zeros = tuple(np.zeros_like(np.asarray(array, dtype=float)) for array in arrays)
        return cls(zeros, tuple(z.copy() for z in zeros), 0, lr, beta1, beta2, eps)


def init_mlp(widths, rng):
    """
    Initialize an MLP with the given layer widths.

    Weights are uniform in +-sqrt(6 / (fan_in + fan_out)); biases start at 0.

    Args:
        widths (sequence of int): [in, hidden..., out]
        rng (numpy.random.Generator): parameter stream
    """
    widths = [int(width) for width in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise StructuralError(f'Invalid MLP widths {widths}.')
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(weight, np.zeros(fan_out)))
    return MlpParams(tuple(layers))


def mlp_forward_trace(params, inputs):
    """
    Forward pass that also returns the values needed for backprop.

    Args:
        params (MlpParams): network parameters
        inputs (ndarray): (B, in) batch of inputs

    Returns:
        tuple: (outputs (B, out), ForwardTrace)
    """
    hidden = np.atleast_2d(np.asarray(inputs, dtype=float))
    if hidden.shape[1] != params.in_width:
        raise StructuralError(
            f'Input width {hidden.shape[1]} does not match the first layer ({params.in_width}).'
        )

    layer_inputs = []
    pre_activations = []
    last = len(params.layers) - 1
    for index, layer in enumerate(params.layers):
        layer_inputs.append(hidden)
        pre = hidden @ layer.weight.T + layer.bias
        if index < last:
            pre_activations.append(pre)
            hidden = np.maximum(pre, 0.0)
        else:
            hidden = pre
    return hidden, ForwardTrace(layer_inputs, pre_activations)


def mlp_forward(params, inputs):
    """
    Evaluate the network on a single input vector or a (B, in) batch.

    Raises:
        StructuralError: If the input width does not match the first layer.
    """
    array = np.asarray(inputs, dtype=float)
    outputs, _ = mlp_forward_trace(params, array)
    return outputs[0] if array.ndim == 1 else outputs


def mlp_backward(params, trace, grad_outputs):
    """
    Reverse-mode gradients of a scalar loss.

    Args:
        params (MlpParams): parameters used in the forward pass
        trace (ForwardTrace): trace returned by mlp_forward_trace
        grad_outputs (ndarray): dLoss/dOutputs, shape (B, out)

    Returns:
        tuple: (gradients in MlpParams.arrays() order, dLoss/dInputs)
    """
    grad = np.asarray(grad_outputs, dtype=float)
    grads = [None] * (2 * len(params.layers))
    for index in reversed(range(len(params.layers))):
        layer = params.layers[index]
        grads[2 * index] = grad.T @ trace.layer_inputs[index]
        grads[2 * index + 1] = grad.sum(axis=0)
        grad = grad @ layer.weight
        if index > 0:
            grad = grad * (trace.pre_activations[index - 1] > 0.0)
    return grads, grad


def weighted_mse(predictions, targets, weights):
    """
    Weighted squared loss sum_i w_i (y_i - yhat_i)^2 / sum_i w_i.

    Returns:
        tuple: (loss, dLoss/dPredictions)

    Raises:
        StructuralError: On negative weights or length mismatch.
        DegenerateBatchError: If every weight is zero.
    """
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if not (predictions.shape == targets.shape == weights.shape):
        raise StructuralError(
            f'Shapes differ: predictions {predictions.shape}, targets {targets.shape}, '
            f'weights {weights.shape}.'
        )
    if np.any(weights < 0):
        raise StructuralError('Sample weights must be nonnegative.')
    total = float(weights.sum())
    if total <= 0.0:
        raise DegenerateBatchError('All sample weights in the batch are zero.')

    residuals = predictions - targets
    loss = float(np.dot(weights, residuals * residuals) / total)
    return loss, 2.0 * weights * residuals / total


def weighted_mse_loss_and_grad(params, batch, sample_weights):
    """Loss and parameter gradients of a single-output regression MLP."""
    if params.out_width != 1:
        raise StructuralError('A regression network must have exactly one output.')
    outputs, trace = mlp_forward_trace(params, batch.inputs)
    loss, grad_predictions = weighted_mse(outputs[:, 0], batch.targets, sample_weights)
    grads, _ = mlp_backward(params, trace, grad_predictions[:, None])
    return loss, grads


def adam_update(arrays, grads, state):
    """
    Apply one Adam step to a list of arrays.

    Returns:
        tuple: (updated arrays, updated AdamState)
    """
    if not (len(arrays) == len(grads) == len(state.first_moments)):
        raise StructuralError('Parameter, gradient and moment lists differ in length.')

    step = state.step + 1
    first_correction = 1.0 - state.beta1 ** step
    second_correction = 1.0 - state.beta2 ** step
    updated, first_moments, second_moments = [], [], []
    for array, grad, first, second in zip(arrays, grads, state.first_moments, state.second_moments):
        if np.shape(array) != np.shape(grad) or np.shape(array) != np.shape(first):
            raise StructuralError(
                f'Shape mismatch in Adam update: {np.shape(array)} vs {np.shape(grad)}.'
            )
        first = state.beta1 * first + (1.0 - state.beta1) * grad
        second = state.beta2 * second + (1.0 - state.beta2) * grad * grad
        step_size = (first / first_correction) / (np.sqrt(second / second_correction) + state.eps)
        updated.append(array - state.lr * step_size)
        first_moments.append(first)
        second_moments.append(second)

    new_state = replace(
        state,
        first_moments=tuple(first_moments),
        second_moments=tuple(second_moments),
        step=step,
    )
    return updated, new_state


def weighted_mse_step(params, state, batch, sample_weights):
    """
    One Adam step on the weighted squared loss.

    Returns:
        tuple: (new MlpParams, new AdamState, loss before the step)
    """
    loss, grads = weighted_mse_loss_and_grad(params, batch, sample_weights)
    arrays, state = adam_update(params.arrays(), grads, state)
    return params.with_arrays(arrays), state, loss


def gradient_check(params, batch, sample_weights, h=1e-5, eps=1e-6):
    """
    Compare backprop gradients with central differences.

    Returns:
        float: max over parameters of |analytic - fd| / (|analytic| + |fd| + eps)

    Raises:
        StructuralError: If h is not positive.
    """
    if h <= 0:
        raise StructuralError('Finite-difference step h must be positive.')

    _, analytic = weighted_mse_loss_and_grad(params, batch, sample_weights)
    arrays = [array.copy() for array in params.arrays()]

    def loss_at():
        loss, _ = weighted_mse_loss_and_grad(params.with_arrays(arrays), batch, sample_weights)
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
