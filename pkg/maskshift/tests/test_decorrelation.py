"""
Unit tests for the sample-reweighting objective and its optimizer.

The vectorized objective is checked against per-pair partial covariances,
and the per-pair formula against a plain double loop.
"""

import os
import tempfile
from itertools import combinations

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from maskshift.decorrelation import (
    DecorrMode,
    DecorrelationObjective,
    RffBank,
    WeightOptConfig,
    WeightVector,
    decorrelation_objective,
    draw_banks,
    feature_var,
    fit_weights,
    lift,
    mask_var,
    optimize_weights,
    partial_cov,
    rff_apply,
    softplus_inverse,
    standardize_features,
    write_weights_csv,
)
from maskshift.exceptions import PairSkipped, StructuralError
from maskshift.mask_gen import MaskedDataset, mcar_ind_masks


def make_masked(size, n, seed, rate=0.4, correlated=True):
    """Masked data whose first two features are strongly correlated."""
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((size, n))
    if correlated:
        features[:, 1] = features[:, 0] + 0.1 * rng.standard_normal(size)
    masks = mcar_ind_masks(np.full(size, rate), n, rng)
    return MaskedDataset.from_complete(features, masks, features.sum(axis=1))


def naive_partial_cov(dataset, weights, var_a, var_b, banks):
    """Per-pair partial cross-covariance written as explicit loops."""
    values = standardize_features(dataset)
    size = len(dataset)

    def lifted(var, row):
        bank = banks.bank(var)
        if var.kind.value == 'x':
            return weights[row] * rff_apply(bank, values[row, var.index])
        return weights[row] * rff_apply(bank, dataset.masks[row, var.index])

    def usable(var, row):
        return var.kind.value == 'm' or dataset.masks[row, var.index] == 1

    def center(var):
        rows = [row for row in range(size) if usable(var, row)]
        return sum(lifted(var, row) for row in rows) / len(rows)

    center_a, center_b = center(var_a), center(var_b)
    rows = [row for row in range(size) if usable(var_a, row) and usable(var_b, row)]
    total = np.zeros((banks.q, banks.q))
    for row in rows:
        total += np.outer(lifted(var_a, row) - center_a, lifted(var_b, row) - center_b)
    return total / (len(rows) - 1)


class RandomFeatureTest(SimpleTestCase):
    """Test cases for random Fourier feature banks."""

    def test_rff_values(self):
        bank = RffBank(np.array([0.0, 1.0]), np.array([0.0, np.pi / 2]))
        assert_allclose(rff_apply(bank, 0.0), [np.sqrt(2), 0.0], atol=1e-12)
        self.assertEqual(rff_apply(bank, np.zeros((4, 3))).shape, (4, 3, 2))

    def test_phase_range_enforced(self):
        with self.assertRaises(StructuralError):
            RffBank(np.zeros(2), np.array([0.0, 2 * np.pi]))

    def test_banks_are_per_variable(self):
        banks = draw_banks(3, 5, np.random.default_rng(0))
        self.assertEqual((banks.n, banks.q), (3, 5))
        self.assertFalse(np.allclose(banks.bank(feature_var(0)).omega, banks.bank(mask_var(0)).omega))

    def test_q_must_be_positive(self):
        with self.assertRaises(StructuralError):
            draw_banks(2, 0, np.random.default_rng(0))


class PartialCovTest(SimpleTestCase):
    """Test cases for the per-pair partial cross-covariance."""

    def setUp(self):
        self.data = make_masked(40, 3, seed=1)
        self.banks = draw_banks(3, 4, np.random.default_rng(2))
        self.weights = np.random.default_rng(3).uniform(0.5, 1.5, size=40)

    def test_matches_double_loop(self):
        """Every kind of pair agrees with the explicit loop."""
        pairs = [
            (feature_var(0), feature_var(1)),
            (feature_var(2), mask_var(0)),
            (mask_var(1), mask_var(2)),
            (mask_var(2), feature_var(1)),
        ]
        for var_a, var_b in pairs:
            with self.subTest(pair=(str(var_a), str(var_b))):
                assert_allclose(
                    partial_cov(self.data, self.weights, var_a, var_b, self.banks),
                    naive_partial_cov(self.data, self.weights, var_a, var_b, self.banks),
                    atol=1e-12,
                )

    def test_independent_pair_is_small_next_to_duplicated_pair(self):
        """At N=10^4 an independent pair scores at most 10% of a pair with X_k = X_l."""
        rng = np.random.default_rng(31)
        size = 10000
        first = rng.standard_normal(size)
        features = np.column_stack([first, first, rng.standard_normal(size)])
        data = MaskedDataset.from_complete(features, np.ones((size, 3)), np.zeros(size))
        banks = draw_banks(3, 5, rng)
        weights = np.ones(size)
        duplicated = partial_cov(data, weights, feature_var(0), feature_var(1), banks)
        independent = partial_cov(data, weights, feature_var(0), feature_var(2), banks)
        self.assertLessEqual(np.sum(independent ** 2), 0.1 * np.sum(duplicated ** 2))

    def test_mask_feature_is_transpose(self):
        forward = partial_cov(self.data, self.weights, feature_var(0), mask_var(2), self.banks)
        backward = partial_cov(self.data, self.weights, mask_var(2), feature_var(0), self.banks)
        assert_allclose(backward, forward.T)

    def test_self_pair_rejected(self):
        with self.assertRaises(StructuralError):
            partial_cov(self.data, self.weights, feature_var(1), feature_var(1), self.banks)

    def test_out_of_range_rejected(self):
        with self.assertRaises(StructuralError):
            partial_cov(self.data, self.weights, feature_var(0), mask_var(3), self.banks)

    def test_pair_without_common_rows_is_skipped(self):
        features = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [0.0, 4.0]])
        masks = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
        data = MaskedDataset(features, masks, np.zeros(4))
        banks = draw_banks(2, 3, np.random.default_rng(0))
        with self.assertRaises(PairSkipped) as context:
            partial_cov(data, np.ones(4), feature_var(0), feature_var(1), banks)
        self.assertEqual(context.exception.count, 0)


class ObjectiveTest(SimpleTestCase):
    """Test cases for the full objective and its gradient."""

    def setUp(self):
        self.data = make_masked(30, 3, seed=4)
        self.banks = draw_banks(3, 3, np.random.default_rng(5))
        self.weights = WeightVector(np.random.default_rng(6).normal(0.5, 0.3, size=30)).weights

    def pair_sum(self, pairs):
        total = 0.0
        for var_a, var_b in pairs:
            try:
                matrix = partial_cov(self.data, self.weights, var_a, var_b, self.banks)
            except PairSkipped:
                continue
            total += float(np.sum(matrix ** 2))
        return total

    def test_modes_match_pair_sums(self):
        """The vectorized objective equals the sum over the selected pairs."""
        n = 3
        intra = [(feature_var(k), feature_var(l)) for k, l in combinations(range(n), 2)]
        intra += [(mask_var(k), mask_var(l)) for k, l in combinations(range(n), 2)]
        inter = [(feature_var(k), mask_var(l)) for k in range(n) for l in range(n)]
        expected = {
            DecorrMode.FULL: self.pair_sum(intra + inter),
            DecorrMode.INTRA: self.pair_sum(intra),
            DecorrMode.INTER: self.pair_sum(inter),
            DecorrMode.NONE: 0.0,
        }
        regularizer = self.weights.std() / self.weights.mean()
        for mode, covariance_part in expected.items():
            with self.subTest(mode=mode.value):
                value = decorrelation_objective(self.data, self.weights, mode, 0.7, self.banks)
                self.assertAlmostEqual(value, covariance_part + 0.7 * regularizer, places=10)

    def test_uniform_weights_have_no_regularizer(self):
        objective = DecorrelationObjective(lift(self.data, self.banks), DecorrMode.NONE, gamma=3.0)
        self.assertAlmostEqual(objective.value(np.ones(30)), 0.0)

    def test_gradient_in_free_parameters(self):
        """Analytic gradient with respect to v matches central differences."""
        objective = DecorrelationObjective(lift(self.data, self.banks), DecorrMode.FULL, gamma=0.5)
        params = np.random.default_rng(7).normal(0.5, 0.3, size=30)
        _, analytic = objective.value_and_grad_params(params)
        h = 1e-6
        for index in range(0, 30, 3):
            shifted = params.copy()
            shifted[index] += h
            plus, _ = objective.value_and_grad_params(shifted)
            shifted[index] -= 2 * h
            minus, _ = objective.value_and_grad_params(shifted)
            finite_difference = (plus - minus) / (2 * h)
            self.assertAlmostEqual(analytic[index], finite_difference, delta=1e-5 + 1e-4 * abs(finite_difference))

    def test_gradient_over_seeds(self):
        """Central differences agree with the analytic gradient for every mode on 20 seeds."""
        for seed in range(20):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(100 + seed)
                data = make_masked(20, 3, seed=200 + seed)
                banks = draw_banks(3, 2, rng)
                mode = list(DecorrMode)[seed % 3]
                objective = DecorrelationObjective(lift(data, banks), mode, gamma=0.5)
                params = rng.normal(0.5, 0.3, size=20)
                _, analytic = objective.value_and_grad_params(params)
                h = 1e-6
                for index in (0, 7, 13, 19):
                    shifted = params.copy()
                    shifted[index] += h
                    plus, _ = objective.value_and_grad_params(shifted)
                    shifted[index] -= 2 * h
                    minus, _ = objective.value_and_grad_params(shifted)
                    finite_difference = (plus - minus) / (2 * h)
                    self.assertAlmostEqual(
                        analytic[index], finite_difference, delta=1e-5 + 1e-4 * abs(finite_difference)
                    )

    def test_negative_gamma_rejected(self):
        with self.assertRaises(StructuralError):
            DecorrelationObjective(lift(self.data, self.banks), DecorrMode.FULL, gamma=-1.0)

    def test_weight_length_checked(self):
        with self.assertRaises(StructuralError):
            decorrelation_objective(self.data, np.ones(29), DecorrMode.FULL, 1.0, self.banks)


class WeightVectorTest(SimpleTestCase):
    """Test cases for the weight parametrization."""

    def test_uniform_weights(self):
        np.testing.assert_array_equal(WeightVector.uniform(5).weights, np.ones(5))
        np.testing.assert_array_equal(WeightVector(np.full(4, 3.0)).weights, np.ones(4))

    def test_weights_have_mean_one(self):
        weights = WeightVector(np.random.default_rng(0).normal(size=50)).weights
        self.assertAlmostEqual(float(weights.mean()), 1.0)
        self.assertTrue(np.all(weights > 0))

    def test_from_weights_round_trip(self):
        weights = np.array([0.5, 1.0, 1.5])
        assert_allclose(WeightVector.from_weights(weights).weights, weights)

    def test_softplus_inverse(self):
        self.assertAlmostEqual(float(np.logaddexp(0.0, softplus_inverse(2.5))), 2.5)

    def test_invalid_vectors_rejected(self):
        with self.assertRaises(StructuralError):
            WeightVector(np.array([]))
        with self.assertRaises(StructuralError):
            WeightVector.from_weights(np.array([1.0, 0.0]))


class FitWeightsTest(SimpleTestCase):
    """Test cases for the weight optimizer."""

    def setUp(self):
        self.data = make_masked(80, 4, seed=8)
        self.banks = draw_banks(4, 3, np.random.default_rng(9))
        self.rng = np.random.default_rng(10)

    def test_objective_does_not_increase(self):
        """The returned weights never score worse than uniform weights."""
        config = WeightOptConfig(iterations=60, lr=0.05)
        fit = fit_weights(self.data, DecorrMode.FULL, 0.1, config, self.banks, self.rng)
        self.assertLessEqual(fit.final_objective, fit.initial_objective)
        self.assertLess(fit.final_objective, fit.initial_objective)
        self.assertEqual(len(fit.trace), 61)
        self.assertAlmostEqual(float(fit.weights.weights.mean()), 1.0)
        recomputed = decorrelation_objective(self.data, fit.weights, DecorrMode.FULL, 0.1, self.banks)
        self.assertAlmostEqual(recomputed, fit.final_objective, places=8)

    def test_correlated_pair_is_reduced(self):
        """Reweighting shrinks the dominant feature/feature covariance."""
        config = WeightOptConfig(iterations=150, lr=0.05)
        weights = optimize_weights(self.data, DecorrMode.INTRA, 0.1, config, self.banks, self.rng)
        before = partial_cov(self.data, np.ones(80), feature_var(0), feature_var(1), self.banks)
        after = partial_cov(self.data, weights, feature_var(0), feature_var(1), self.banks)
        self.assertLess(np.sum(after ** 2), np.sum(before ** 2))

    def test_mode_none_keeps_uniform_weights(self):
        fit = fit_weights(self.data, DecorrMode.NONE, 1.0, WeightOptConfig(iterations=10), self.banks, self.rng)
        assert_allclose(fit.weights.weights, np.ones(80))
        self.assertEqual(fit.final_objective, fit.initial_objective)

    def test_zero_iterations(self):
        fit = fit_weights(self.data, DecorrMode.FULL, 1.0, WeightOptConfig(iterations=0), self.banks, self.rng)
        assert_allclose(fit.weights.weights, np.ones(80))

    def test_empty_dataset_rejected(self):
        empty = MaskedDataset(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0))
        with self.assertRaises(StructuralError):
            fit_weights(empty, DecorrMode.FULL, 1.0, WeightOptConfig(), self.banks, self.rng)

    def test_write_weights_csv(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'weights.csv')
            write_weights_csv(WeightVector.uniform(3), path)
            frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ['sample_index', 'weight'])
        assert_allclose(frame['weight'].to_numpy(), 1.0)
