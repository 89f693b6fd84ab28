"""
Unit tests for Shapley-value explanations.

Run with: pytest tests/test_explanation.py
"""

import numpy as np
import pytest
from scipy.special import softmax

from delivery.explanation import (
    EnumerationLimitError,
    ShapExplanation,
    dependence_table,
    explain_dataset,
    global_importance,
    importance_frame,
    sample_background,
    shap_exact,
    shap_sampled,
    write_dependence_csv,
)

WEIGHTS = np.array([0.5, -1.0, 2.0])


def linear(rows):
    return rows @ WEIGHTS


def nonlinear(rows):
    """Three-class softmax of interacting features."""
    scores = np.column_stack([
        rows[:, 0] * rows[:, 1],
        np.sin(rows[:, 2]) + rows[:, 3],
        rows[:, 0] ** 2 - rows[:, 3],
    ])
    return softmax(scores, axis=1)


def explanation(values, x=None):
    values = np.asarray(values, dtype=np.float64)
    p = values.shape[0]
    return ShapExplanation(
        x=np.zeros(p) if x is None else np.asarray(x, dtype=np.float64),
        base_values=np.zeros(values.shape[1]),
        values=values,
        prediction=values.sum(axis=0),
        method="exact",
        background_size=1,
        feature_names=tuple(f"x{j}" for j in range(p)),
    )


class TestExact:
    """Test exact enumeration."""

    def test_linear_model(self, rng):
        """Test that linear models get w_j (x_j − mean background_j)."""
        background = rng.standard_normal((30, 3))
        x = np.array([1.0, 2.0, -0.5])
        result = shap_exact(linear, x, background)
        expected = WEIGHTS * (x - background.mean(axis=0))
        np.testing.assert_allclose(result.values[:, 0], expected, atol=1e-12)

    def test_dummy_feature(self, rng):
        """Test that a feature the model ignores gets zero."""
        result = shap_exact(lambda rows: rows[:, 0] * rows[:, 2], [1.0, 5.0, 2.0], rng.standard_normal((10, 3)))
        assert result.values[1, 0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        """Test that interchangeable features share credit equally."""
        result = shap_exact(lambda rows: rows[:, 0] + rows[:, 1], [1.0, 1.0], np.zeros((1, 2)))
        np.testing.assert_allclose(result.values[:, 0], [1.0, 1.0])

    def test_additivity(self, rng):
        """Test that base value plus attributions equals the prediction."""
        result = shap_exact(nonlinear, rng.standard_normal(4), rng.standard_normal((20, 4)))
        np.testing.assert_allclose(result.additivity_gap(), 0.0, atol=1e-12)
        np.testing.assert_allclose(result.prediction, nonlinear(result.x.reshape(1, -1))[0], atol=1e-12)
        assert result.values.shape == (4, 3)

    def test_refuses_many_features(self):
        """Test that more than 15 features points to the sampled method."""
        with pytest.raises(EnumerationLimitError, match="sampled"):
            shap_exact(lambda rows: rows.sum(axis=1), np.zeros(16), np.zeros((2, 16)))

    def test_background_width_checked(self):
        """Test that mismatched background width is rejected."""
        with pytest.raises(ValueError, match="features"):
            shap_exact(linear, [1.0, 2.0, 3.0], np.zeros((4, 2)))


class TestSampled:
    """Test permutation sampling."""

    def test_constant_model(self, rng):
        """Test that a constant model gets zero attributions and errors."""
        result = shap_sampled(lambda rows: np.ones(rows.shape[0]), rng.standard_normal(3), rng.standard_normal((5, 3)), 50)
        np.testing.assert_array_equal(result.values, 0.0)
        np.testing.assert_array_equal(result.standard_errors, 0.0)

    def test_deterministic(self, rng):
        """Test that the same seed gives identical estimates."""
        x, background = rng.standard_normal(4), rng.standard_normal((10, 4))
        a = shap_sampled(nonlinear, x, background, 40, seed=3)
        b = shap_sampled(nonlinear, x, background, 40, seed=3)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.seed == 3

    def test_additivity(self, rng):
        """Test that every ordering telescopes to the prediction."""
        result = shap_sampled(nonlinear, rng.standard_normal(4), rng.standard_normal((10, 4)), 25, seed=1)
        np.testing.assert_allclose(result.additivity_gap(), 0.0, atol=1e-12)

    def test_agrees_with_exact(self, rng):
        """Test that estimates lie within four standard errors of exact values."""
        x, background = rng.standard_normal(4), rng.standard_normal((15, 4))
        exact = shap_exact(nonlinear, x, background)
        sampled = shap_sampled(nonlinear, x, background, 500, seed=2)
        assert np.all(np.abs(sampled.values - exact.values) <= 4 * sampled.standard_errors + 1e-10)

    def test_linear_exact_for_any_ordering(self, rng):
        """Test that linear models need a single ordering."""
        x, background = rng.standard_normal(3), rng.standard_normal((8, 3))
        sampled = shap_sampled(linear, x, background, 1, seed=0)
        exact = shap_exact(linear, x, background)
        np.testing.assert_allclose(sampled.values, exact.values, atol=1e-12)

    def test_rejects_zero_permutations(self):
        """Test that n_permutations below one is rejected."""
        with pytest.raises(ValueError, match="n_permutations"):
            shap_sampled(linear, np.zeros(3), np.zeros((2, 3)), 0)


class TestExplainDataset:
    """Test batch explanation."""

    def test_linear_rows(self, rng):
        """Test exact attributions for several rows of a linear model."""
        rows = rng.standard_normal((5, 3))
        background = rng.standard_normal((12, 3))
        results = explain_dataset(linear, rows, background, method="exact")
        for row, result in zip(rows, results):
            np.testing.assert_allclose(result.values[:, 0], WEIGHTS * (row - background.mean(axis=0)), atol=1e-12)

    def test_sampled_row_streams(self, rng):
        """Test that sampled row i uses the stream (seed, i)."""
        rows = rng.standard_normal((3, 4))
        background = rng.standard_normal((6, 4))
        results = explain_dataset(nonlinear, rows, background, method="sampled", n_permutations=10, seed=7)
        single = shap_sampled(nonlinear, rows[2], background, 10, seed=[7, 2])
        np.testing.assert_array_equal(results[2].values, single.values)
        assert results[2].seed == 7

    def test_exact_refused_for_wide_data(self):
        """Test that exact batch explanation refuses 20 features."""
        with pytest.raises(EnumerationLimitError, match="sampled"):
            explain_dataset(lambda rows: rows.sum(axis=1), np.zeros((2, 20)), np.zeros((2, 20)), method="exact")

    def test_unknown_method(self):
        """Test that unknown methods are rejected."""
        with pytest.raises(ValueError, match="exact or sampled"):
            explain_dataset(linear, np.zeros((1, 3)), np.zeros((1, 3)), method="kernel")

    def test_background_sample(self, rng):
        """Test background subsampling keeps row order and size."""
        rows = np.arange(20.0).reshape(10, 2)
        sample = sample_background(rows, 4, seed=1)
        assert sample.shape == (4, 2)
        assert np.all(np.diff(sample[:, 0]) > 0)
        np.testing.assert_array_equal(sample_background(rows, 50), rows)


class TestImportance:
    """Test global importance and dependence tables."""

    def test_sums_absolute_values(self):
        """Test that importance sums absolute attributions per class."""
        ranking = global_importance([
            explanation([[0.1, -0.2], [0.5, 0.0]]),
            explanation([[-0.3, 0.1], [0.0, 0.0]]),
        ])
        np.testing.assert_allclose(ranking.per_class, [[0.4, 0.3], [0.5, 0.0]])
        np.testing.assert_allclose(ranking.total, [0.7, 0.5])
        assert ranking.ranked_features == ["x0", "x1"]

    def test_ties_keep_column_order(self):
        """Test that equal totals rank in column order."""
        ranking = global_importance([explanation([[0.2], [-0.2], [0.1]])])
        assert ranking.ranked_features == ["x0", "x1", "x2"]

    def test_importance_frame(self):
        """Test the importance table layout."""
        frame = importance_frame(global_importance([explanation([[0.1, 0.0], [0.0, 0.9]])]))
        assert list(frame["feature"]) == ["x1", "x0"]
        assert list(frame["rank"]) == [1, 2]
        assert set(frame["scale"]) == {"probability"}

    def test_inconsistent_features(self):
        """Test that explanations over different features are rejected."""
        with pytest.raises(ValueError, match="inconsistent"):
            global_importance([explanation([[0.1]]), explanation([[0.1], [0.2]])])

    def test_dependence_sorted(self):
        """Test that dependence rows are sorted by feature value."""
        explanations = [
            explanation([[0.3], [0.0]], x=[2.0, 0.0]),
            explanation([[-0.1], [0.0]], x=[-1.0, 0.0]),
            explanation([[0.2], [0.0]], x=[0.5, 0.0]),
        ]
        table = dependence_table(explanations, "x0", 0)
        assert list(table["feature_value"]) == [-1.0, 0.5, 2.0]
        assert list(table["shap_value"]) == [-0.1, 0.2, 0.3]
        assert list(table["observation"]) == [1, 2, 0]

    def test_dependence_csv(self, tmp_path):
        """Test that the dependence file stacks every class."""
        explanations = [explanation([[0.3, 0.1], [0.0, 0.0]]), explanation([[0.1, 0.2], [0.0, 0.0]])]
        path = write_dependence_csv(explanations, "x0", tmp_path / "dep.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "observation,feature,feature_value,shap_value,class,scale"
        assert len(lines) == 1 + 2 * 2
