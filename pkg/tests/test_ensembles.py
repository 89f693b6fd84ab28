"""
Unit tests for the random forest and gradient-boosted ensembles.

Run with: pytest tests/test_ensembles.py
"""

import numpy as np
import pytest

from conftest import blob_dataset, make_dataset
from delivery.data_model import split_train_test
from delivery.ensembles import (
    ForestParams,
    GBMParams,
    base_scores,
    cross_entropy,
    fit_gbm,
    fit_random_forest,
    forest_from_lines,
    forest_predict,
    forest_predict_proba,
    forest_to_lines,
    gbm_from_lines,
    gbm_predict,
    gbm_predict_proba,
    gbm_scores,
    gbm_to_lines,
    majority_vote,
    softmax_grad_hess,
)
from delivery.evaluation import confusion_matrix, overall_accuracy
from delivery.families import fit_model
from delivery.model_selection import cross_validate
from delivery.trees import TreeParams, fit_tree


@pytest.fixture(scope="module")
def blob_split():
    return split_train_test(blob_dataset(), 0.7, seed=0)


@pytest.fixture(scope="module")
def small_gbm(blob_split):
    train, _ = blob_split
    return fit_gbm(train, GBMParams(n_rounds=20, max_depth=2), seed=3)


class TestSoftmaxStatistics:
    """Test the softmax cross-entropy gradient and hessian."""

    def test_uniform_scores(self):
        """Test gradient and hessian at equal scores."""
        grad, hess = softmax_grad_hess(np.zeros((1, 6)), [2])
        expected = np.full(6, 1 / 6)
        expected[2] -= 1.0
        np.testing.assert_allclose(grad[0], expected)
        np.testing.assert_allclose(hess[0], np.full(6, 5 / 36))

    def test_gradient_matches_finite_differences(self, rng):
        """Test the gradient against central differences of the loss."""
        scores = rng.standard_normal((1, 6))
        grad, _ = softmax_grad_hess(scores, [4])
        h = 1e-6
        numeric = np.empty(6)
        for c in range(6):
            up, down = scores.copy(), scores.copy()
            up[0, c] += h
            down[0, c] -= h
            numeric[c] = (cross_entropy(up, [4]) - cross_entropy(down, [4])) / (2 * h)
        np.testing.assert_allclose(grad[0], numeric, atol=1e-7)

    def test_gradient_rows_sum_to_zero(self, rng):
        """Test that each row's gradient sums to zero."""
        grad, _ = softmax_grad_hess(rng.standard_normal((10, 6)) * 5, rng.integers(0, 6, 10))
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_shift_invariant(self, rng):
        """Test that adding a constant to all scores changes nothing."""
        scores = rng.standard_normal((5, 6))
        labels = rng.integers(0, 6, 5)
        grad, hess = softmax_grad_hess(scores, labels)
        grad_shifted, hess_shifted = softmax_grad_hess(scores + 100.0, labels)
        np.testing.assert_allclose(grad, grad_shifted, atol=1e-12)
        np.testing.assert_allclose(hess, hess_shifted, atol=1e-12)

    def test_base_scores_floor(self):
        """Test that absent classes get the floored log frequency."""
        base = base_scores([0, 0, 1, 1])
        assert base[0] == pytest.approx(np.log(0.5))
        assert base[5] == pytest.approx(np.log(1e-6))


class TestMajorityVote:
    """Test vote aggregation."""

    def test_plurality(self):
        """Test that the most frequent vote wins."""
        assert majority_vote([2, 2, 3]) == 2

    def test_tie_goes_low(self):
        """Test that tied votes go to the lowest class."""
        assert majority_vote([1, 2]) == 1


class TestRandomForest:
    """Test random forest training and prediction."""

    def test_separates_blobs(self, blob_split):
        """Test held-out accuracy on two well separated classes."""
        train, test = blob_split
        model = fit_random_forest(train, ForestParams(n_trees=50), seed=1)
        assert overall_accuracy(confusion_matrix(test.labels, forest_predict(model, test.rows))) >= 0.98

    def test_deterministic(self, blob_split):
        """Test that the same seed gives identical trees."""
        train, _ = blob_split
        params = ForestParams(n_trees=5, max_depth=4)
        a = fit_random_forest(train, params, seed=9)
        b = fit_random_forest(train, params, seed=9)
        assert all(x.equals(y) for x, y in zip(a.trees, b.trees))

    def test_single_tree_without_sampling(self, rng):
        """Test that one unsampled tree matches a plain CART tree."""
        X = rng.standard_normal((120, 3))
        data = make_dataset(X, rng.integers(0, 6, 120))
        params = ForestParams(n_trees=1, max_depth=6, min_samples_leaf=2, features_per_split=3, bootstrap=False)
        model = fit_random_forest(data, params, seed=0)
        tree = fit_tree(data, params=TreeParams(max_depth=6, min_samples_leaf=2))
        np.testing.assert_array_equal(forest_predict(model, X), tree.predict(X))

    def test_probabilities_are_vote_shares(self, blob_split):
        """Test that class probabilities sum to one."""
        train, test = blob_split
        model = fit_random_forest(train, ForestParams(n_trees=7, max_depth=3), seed=2)
        probs = forest_predict_proba(model, test.rows)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        np.testing.assert_allclose(probs * 7, np.round(probs * 7))

    def test_importances_normalised(self, blob_split):
        """Test that importances sum to one."""
        train, _ = blob_split
        model = fit_random_forest(train, ForestParams(n_trees=5), seed=0)
        assert model.importances().sum() == pytest.approx(1.0)

    def test_dimension_mismatch(self, blob_split):
        """Test that a matrix of the wrong width is rejected."""
        train, _ = blob_split
        model = fit_random_forest(train, ForestParams(n_trees=2), seed=0)
        with pytest.raises(ValueError, match="Dimension mismatch"):
            forest_predict(model, np.zeros((3, 5)))

    def test_features_per_split_bound(self, blobs):
        """Test that more features per split than columns is rejected."""
        with pytest.raises(ValueError, match="exceeds"):
            fit_random_forest(blobs, ForestParams(n_trees=1, features_per_split=3))

    def test_unknown_setting(self):
        """Test that unknown parameter names are rejected."""
        with pytest.raises(ValueError, match="Unknown"):
            ForestParams.from_mapping({"n_estimators": 10})

    def test_text_round_trip(self, blob_split):
        """Test that a forest predicts identically after a text round trip."""
        train, test = blob_split
        model = fit_random_forest(train, ForestParams(n_trees=4, max_depth=None, bootstrap_fraction=0.5), seed=5)
        rebuilt = forest_from_lines(forest_to_lines(model))
        assert rebuilt.params == model.params
        np.testing.assert_array_equal(forest_predict_proba(rebuilt, test.rows), forest_predict_proba(model, test.rows))


class TestGradientBoosting:
    """Test multiclass boosting."""

    def test_separates_blobs(self, blob_split):
        """Test held-out accuracy on two well separated classes."""
        train, test = blob_split
        model = fit_gbm(train, GBMParams(n_rounds=100, max_depth=3), seed=1)
        assert overall_accuracy(confusion_matrix(test.labels, gbm_predict(model, test.rows))) >= 0.98

    def test_base_score_reproduces_frequencies(self, small_gbm, blob_split):
        """Test that zero rounds predict the training class shares."""
        train, _ = blob_split
        probs = gbm_predict_proba(small_gbm, train.rows[:3], rounds=0)
        frequencies = np.bincount(train.labels, minlength=6) / train.n
        np.testing.assert_allclose(probs, np.tile(frequencies, (3, 1)), atol=1e-5)

    def test_loss_history(self, small_gbm):
        """Test that training loss starts at the base score and decreases."""
        history = np.array(small_gbm.loss_history)
        assert history.shape == (21,)
        assert np.all(np.diff(history) <= 1e-9)
        assert history[-1] < history[0]

    def test_rounds_truncation(self, small_gbm, blob_split):
        """Test that the full round count matches untruncated scores."""
        _, test = blob_split
        np.testing.assert_array_equal(gbm_scores(small_gbm, test.rows, rounds=20), gbm_scores(small_gbm, test.rows))
        with pytest.raises(ValueError, match="rounds"):
            gbm_scores(small_gbm, test.rows, rounds=21)

    def test_probabilities_sum_to_one(self, small_gbm, blob_split):
        """Test that softmax outputs form distributions."""
        _, test = blob_split
        np.testing.assert_allclose(gbm_predict_proba(small_gbm, test.rows).sum(axis=1), 1.0)

    def test_deterministic(self, blob_split, small_gbm):
        """Test that the same seed gives identical predictions."""
        train, test = blob_split
        again = fit_gbm(train, GBMParams(n_rounds=20, max_depth=2), seed=3)
        np.testing.assert_array_equal(gbm_scores(again, test.rows), gbm_scores(small_gbm, test.rows))

    def test_text_round_trip(self, small_gbm, blob_split):
        """Test that a boosted model scores identically after a text round trip."""
        _, test = blob_split
        rebuilt = gbm_from_lines(gbm_to_lines(small_gbm))
        assert rebuilt.params == small_gbm.params
        assert rebuilt.loss_history == small_gbm.loss_history
        np.testing.assert_array_equal(gbm_scores(rebuilt, test.rows), gbm_scores(small_gbm, test.rows))

    def test_invalid_learning_rate(self):
        """Test that learning rates outside (0, 1] are rejected."""
        with pytest.raises(ValueError, match="learning_rate"):
            GBMParams(learning_rate=0.0)


@pytest.mark.slow
class TestParallelDeterminism:
    """Test that worker count never changes a fitted model."""

    def test_forest(self, blob_split):
        """Test forest predictions with one and two workers."""
        train, test = blob_split
        params = ForestParams(n_trees=10, max_depth=5)
        serial = fit_random_forest(train, params, seed=8, n_jobs=1)
        parallel = fit_random_forest(train, params, seed=8, n_jobs=2)
        assert all(a.equals(b) for a, b in zip(serial.trees, parallel.trees))

    def test_gbm(self, blob_split):
        """Test boosted scores with one and two workers."""
        train, test = blob_split
        params = GBMParams(n_rounds=5, max_depth=2, column_subsample=0.5)
        serial = fit_gbm(train, params, seed=8, n_jobs=1)
        parallel = fit_gbm(train, params, seed=8, n_jobs=2)
        np.testing.assert_array_equal(gbm_scores(serial, test.rows), gbm_scores(parallel, test.rows))


@pytest.mark.slow
class TestBlobCapability:
    """Test default ensembles on well separated blobs."""

    @pytest.mark.parametrize("family", ["forest", "gbm"])
    def test_cross_validated_accuracy(self, family, blobs):
        """Test training accuracy of at least 0.98 and 10-fold CV accuracy of at least 0.95."""
        model = fit_model(family, blobs, seed=0)
        assert overall_accuracy(confusion_matrix(blobs.labels, model.predict(blobs))) >= 0.98
        assert cross_validate(family, None, blobs, k=10, seed=0).mean >= 0.95
