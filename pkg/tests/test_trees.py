"""
Unit tests for CART tree induction.

Run with: pytest tests/test_trees.py
"""

import numpy as np
import pytest

from conftest import make_dataset
from delivery.trees import DecisionTree, TreeParams, fit_tree, split_gain


class TestClassificationTree:
    """Test Gini trees."""

    def test_single_split_at_midpoint(self):
        """Test that four sorted points split at 2.5."""
        data = make_dataset([1.0, 2.0, 3.0, 4.0], [0, 0, 1, 1])
        tree = fit_tree(data)
        assert tree.n_nodes == 3
        assert tree.feature[0] == 0
        assert tree.threshold[0] == 2.5
        np.testing.assert_array_equal(tree.predict(np.array([[2.5], [2.6]])), [0, 1])
        np.testing.assert_allclose(tree.value[tree.left[0]], [1, 0, 0, 0, 0, 0])

    def test_pure_node_is_leaf(self):
        """Test that a single-class dataset gives one leaf."""
        data = make_dataset([[1.0], [5.0], [9.0]], [3, 3, 3])
        tree = fit_tree(data)
        assert tree.n_nodes == 1
        assert tree.n_leaves == 1
        assert tree.predict(np.array([[100.0]]))[0] == 3

    def test_overfits_distinct_rows(self, rng):
        """Test that an unlimited tree reproduces its training labels."""
        X = rng.standard_normal((200, 3))
        y = rng.integers(0, 6, 200)
        tree = fit_tree(make_dataset(X, y))
        np.testing.assert_array_equal(tree.predict(X), y)

    def test_overfits_xor(self):
        """Test that a zero-gain root split still lets an unlimited tree fit XOR."""
        X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        y = np.array([0, 0, 1, 1])
        tree = fit_tree(make_dataset(X, y))
        np.testing.assert_array_equal(tree.predict(X), y)
        assert tree.feature[0] == 0
        assert tree.gain[0] == 0.0
        assert tree.n_leaves == 4

    def test_equal_gain_prefers_lower_feature(self):
        """Test that identical columns split on feature 0."""
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        data = make_dataset(np.column_stack([x, x]), [0, 0, 0, 1, 1, 1])
        tree = fit_tree(data)
        assert tree.feature[0] == 0

    def test_structure_invariants(self, rng):
        """Test child ordering, sample bookkeeping and induction limits."""
        X = rng.standard_normal((300, 4))
        y = rng.integers(0, 6, 300)
        tree = fit_tree(make_dataset(X, y), params=TreeParams(max_depth=5, min_samples_leaf=7))

        assert tree.depth <= 5
        for node in range(tree.n_nodes):
            if tree.is_leaf[node]:
                assert tree.n_samples[node] >= 7
                assert tree.value[node].sum() == pytest.approx(1.0)
            else:
                assert tree.left[node] > node
                assert tree.right[node] > node
                assert tree.n_samples[node] == tree.n_samples[tree.left[node]] + tree.n_samples[tree.right[node]]
        assert tree.n_samples[0] == 300

    def test_rows_with_duplicates(self):
        """Test that repeated row indices count once per occurrence."""
        data = make_dataset([1.0, 2.0, 3.0], [0, 1, 1])
        tree = fit_tree(data, rows=np.array([0, 0, 0, 2]))
        assert tree.n_samples[0] == 4
        np.testing.assert_allclose(tree.value[tree.left[0]], [1, 0, 0, 0, 0, 0])

    def test_max_depth_zero(self, blobs):
        """Test that depth zero gives the root distribution."""
        tree = fit_tree(blobs, params=TreeParams(max_depth=0))
        assert tree.n_nodes == 1
        np.testing.assert_allclose(tree.value[0][:2], [0.5, 0.5])

    def test_importances_sum_gains(self):
        """Test that importances total the split gains per feature."""
        data = make_dataset(np.column_stack([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]]), [0, 0, 1, 1])
        tree = fit_tree(data)
        importances = tree.importances(2)
        assert importances[1] == 0.0
        # Gini score 2²/2 + 2²/2 − (2² + 2²)/4
        assert importances[0] == pytest.approx(2.0)

    def test_text_round_trip(self, rng):
        """Test that a tree survives its text form exactly."""
        X = rng.standard_normal((100, 3))
        tree = fit_tree(make_dataset(X, rng.integers(0, 6, 100)), params=TreeParams(max_depth=4))
        rebuilt = DecisionTree.from_lines(tree.to_lines())
        assert rebuilt.equals(tree)
        assert rebuilt.max_depth == 4

    def test_feature_draws_deterministic(self, rng):
        """Test that per-split feature draws follow the seed."""
        X = rng.standard_normal((150, 6))
        data = make_dataset(X, rng.integers(0, 6, 150))
        params = TreeParams(features_per_split=2)
        assert fit_tree(data, params=params, seed=4).equals(fit_tree(data, params=params, seed=4))


class TestRegressionTree:
    """Test second-order regression trees."""

    def test_gain_zero_for_identical_halves(self):
        """Test that splitting identical statistics gains nothing."""
        assert split_gain(1.0, 1.0, 1.0, 1.0, lambda_l2=0.0) == pytest.approx(0.0)

    def test_gain_for_opposite_gradients(self):
        """Test the gain of separating opposite gradients."""
        assert split_gain(-2.0, 1.0, 2.0, 1.0, lambda_l2=0.0) == pytest.approx(4.0)
        assert split_gain(-2.0, 1.0, 2.0, 1.0, lambda_l2=0.0, gamma_split=1.5) == pytest.approx(2.5)

    def test_leaf_value(self):
        """Test that a leaf holds −G/(H+λ) scaled by the learning rate."""
        X = np.array([[0.0], [1.0], [2.0]])
        grad = np.array([1.0, 2.0, 3.0])
        hess = np.ones(3)
        tree = fit_tree(X, grad_hess=(grad, hess), params=TreeParams(max_depth=0, lambda_l2=1.0, leaf_scale=0.1))
        assert tree.kind == "regression"
        assert tree.value[0, 0] == pytest.approx(-0.15)

    def test_splits_opposite_gradients(self):
        """Test that positive and negative gradients land in separate leaves."""
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        grad = np.array([-1.0, -1.0, 1.0, 1.0])
        hess = np.ones(4)
        tree = fit_tree(X, grad_hess=(grad, hess), params=TreeParams(max_depth=1, lambda_l2=0.0, min_child_weight=0.0))
        assert tree.threshold[0] == 1.5
        np.testing.assert_allclose(tree.predict_value(X)[:, 0], [1.0, 1.0, -1.0, -1.0])

    def test_gamma_blocks_weak_split(self):
        """Test that a large split penalty keeps the root a leaf."""
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        grad = np.array([-1.0, -1.0, 1.0, 1.0])
        tree = fit_tree(X, grad_hess=(grad, np.ones(4)), params=TreeParams(gamma_split=100.0))
        assert tree.n_nodes == 1

    def test_column_mask(self, rng):
        """Test that masked-out columns are never split on."""
        X = rng.standard_normal((100, 4))
        grad = X[:, 0] + rng.standard_normal(100) * 0.1
        tree = fit_tree(X, grad_hess=(grad, np.ones(100)), params=TreeParams(max_depth=3), column_mask=[1, 3])
        used = set(tree.feature[~tree.is_leaf])
        assert used <= {1, 3}


class TestTreeParams:
    """Test parameter validation."""

    def test_rejects_bad_leaf_size(self):
        """Test that min_samples_leaf below one is rejected."""
        with pytest.raises(ValueError, match="min_samples_leaf"):
            TreeParams(min_samples_leaf=0)

    def test_classification_needs_labels(self):
        """Test that a bare matrix without labels is rejected."""
        with pytest.raises(ValueError, match="labels"):
            fit_tree(np.zeros((3, 1)))
