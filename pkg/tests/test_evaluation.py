"""
Unit tests for held-out evaluation and the class-imbalance experiment.

Run with: pytest tests/test_evaluation.py
"""

import json

import numpy as np
import pandas as pd
import pytest

from conftest import make_dataset
from delivery.data_model import default_synthetic_spec
from delivery.evaluation import (
    aggregate_shares,
    build_report,
    confusion_matrix,
    format_pct,
    format_report_text,
    imbalance_experiment,
    overall_accuracy,
    precision_recall,
    recall_heatmap,
    report_names,
    share_deltas,
    tv_distance,
    write_heatmap_csv,
    write_report_csv,
    write_report_json,
)
from delivery.families import fit_model

EXACT_TREE = {"n_trees": 1, "max_depth": None, "min_samples_leaf": 1, "bootstrap": False, "features_per_split": 2}


@pytest.fixture
def distinct_data(rng):
    return make_dataset(rng.standard_normal((60, 2)), np.arange(60) % 6)


@pytest.fixture
def perfect_forest(distinct_data):
    return fit_model("forest", distinct_data, EXACT_TREE, seed=0)


class TestConfusionMatrix:
    """Test confusion matrices and derived metrics."""

    def test_hand_tally(self):
        """Test counts, accuracy and per-class metrics on five predictions."""
        matrix = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0])
        assert matrix.counts[0, 0] == 1
        assert matrix.counts[0, 1] == 1
        assert matrix.counts[2, 0] == 1
        assert matrix.n_total == 5
        assert overall_accuracy(matrix) == pytest.approx(0.6)

        metrics = precision_recall(matrix)
        assert metrics[0].precision == pytest.approx(0.5)
        assert metrics[0].recall == pytest.approx(0.5)
        assert metrics[1].precision == pytest.approx(0.5)
        assert metrics[1].recall == pytest.approx(1.0)
        assert metrics[3].precision is None
        assert metrics[3].recall is None

    def test_precision_two_thirds(self):
        """Test precision when one of three predictions is wrong."""
        metrics = precision_recall(confusion_matrix([1, 1, 0], [1, 1, 1]))
        assert metrics[1].precision == pytest.approx(2 / 3)
        assert metrics[0].recall == 0.0
        assert metrics[0].precision is None

    def test_perfect(self):
        """Test that identical labels give a diagonal matrix."""
        labels = [0, 1, 2, 3, 4, 5, 5]
        matrix = confusion_matrix(labels, labels)
        assert overall_accuracy(matrix) == 1.0
        assert np.count_nonzero(matrix.counts - np.diag(np.diag(matrix.counts))) == 0

    def test_accuracy_is_support_weighted_recall(self, rng):
        """Test that accuracy equals recall weighted by class support."""
        matrix = confusion_matrix(rng.integers(0, 6, 300), rng.integers(0, 6, 300))
        weighted = sum(m.recall * m.support for m in precision_recall(matrix) if m.recall is not None)
        assert overall_accuracy(matrix) == pytest.approx(weighted / 300)

    def test_empty(self):
        """Test that empty inputs are rejected."""
        with pytest.raises(ValueError, match="empty"):
            confusion_matrix([], [])

    def test_length_mismatch(self):
        """Test that unequal lengths are rejected."""
        with pytest.raises(ValueError, match="Length mismatch"):
            confusion_matrix([0, 1], [0])

    def test_label_out_of_range(self):
        """Test that labels outside 0..5 are rejected."""
        with pytest.raises(ValueError, match="outside"):
            confusion_matrix([0, 6], [0, 1])

    def test_heatmap_rows(self):
        """Test row normalisation with NaN for absent classes."""
        heatmap = recall_heatmap(confusion_matrix([0, 0, 1], [0, 1, 1]))
        np.testing.assert_allclose(heatmap[0, :2], [0.5, 0.5])
        assert np.all(np.isnan(heatmap[3]))


class TestShares:
    """Test aggregate class shares."""

    def test_shares(self):
        """Test shares of a five-label vector."""
        np.testing.assert_allclose(aggregate_shares([0, 0, 1, 5, 5]), [0.4, 0.2, 0, 0, 0, 0.4])

    def test_tv_properties(self):
        """Test identity, symmetry and the disjoint maximum."""
        a = np.array([0.4, 0.2, 0, 0, 0, 0.4])
        b = np.array([0.1, 0.1, 0.2, 0.2, 0.2, 0.2])
        assert tv_distance(a, a) == 0.0
        assert tv_distance(a, b) == tv_distance(b, a)
        assert tv_distance(np.eye(6)[0], np.eye(6)[5]) == 1.0

    def test_deltas(self):
        """Test that relative deltas are undefined where nothing was observed."""
        absolute, relative = share_deltas([0.5, 0.5, 0, 0, 0, 0], [0.25, 0.5, 0.25, 0, 0, 0])
        assert absolute[0] == pytest.approx(0.25)
        assert relative[0] == pytest.approx(1.0)
        assert relative[2] == pytest.approx(-1.0)
        assert relative[3] is None

    def test_format_pct(self):
        """Test one-decimal percentage formatting."""
        assert format_pct(0.6) == "60.0%"
        assert format_pct(1.0) == "100.0%"


class TestReports:
    """Test model reports and their files."""

    def test_perfect_model(self, perfect_forest, distinct_data):
        """Test a model that memorised distinct rows."""
        [report] = build_report({"memorised": perfect_forest}, distinct_data)
        assert report.accuracy == 1.0
        assert report.tv_argmax == 0.0
        assert report.tv_expected is None
        assert all(m.recall == 1.0 for m in report.per_class)
        assert "Overall accuracy: 100.0%" in format_report_text(report)

    def test_expected_shares_for_probabilistic_models(self, distinct_data):
        """Test that boosted models report expected shares."""
        model = fit_model("gbm", distinct_data, {"n_rounds": 3, "max_depth": 2}, seed=0)
        [report] = build_report([model], distinct_data)
        assert report.model == "gbm"
        assert report.predicted_shares_expected.sum() == pytest.approx(1.0)
        assert report.tv_expected is not None

    def test_schema_mismatch(self, perfect_forest, rng):
        """Test that a test set missing model features is rejected."""
        other = make_dataset(rng.standard_normal((5, 1)), [0] * 5, names=["x0"])
        with pytest.raises(ValueError, match="Schema mismatch"):
            build_report({"memorised": perfect_forest}, other)

    def test_json_byte_identical(self, perfect_forest, distinct_data, tmp_path):
        """Test that repeated writes produce identical bytes."""
        reports = build_report({"memorised": perfect_forest}, distinct_data, seed=4)
        a = write_report_json(reports, tmp_path / "a.json").read_bytes()
        b = write_report_json(build_report({"memorised": perfect_forest}, distinct_data, seed=4), tmp_path / "b.json").read_bytes()
        assert a == b
        payload = json.loads(a)
        assert payload["models"][0]["seed"] == 4
        assert payload["models"][0]["confusion_matrix"][0][0] == 10

    def test_csv_and_heatmap(self, tmp_path, distinct_data, perfect_forest):
        """Test the flat report table and heatmap files."""
        [report] = build_report({"memorised": perfect_forest}, distinct_data)
        frame = pd.read_csv(write_report_csv([report], tmp_path / "report.csv"))
        assert len(frame) == 6
        assert list(frame["class"]) == [0, 1, 2, 3, 4, 5]

        heatmap = pd.read_csv(write_heatmap_csv(report, tmp_path / "heatmap.csv"), index_col=0)
        np.testing.assert_allclose(heatmap.to_numpy(), np.eye(6))

    def test_same_family_models_each_reported(self, perfect_forest, distinct_data):
        """Test that two forests in a list give two distinctly named reports."""
        shallow = fit_model("forest", distinct_data, {**EXACT_TREE, "max_depth": 1}, seed=1)
        reports = build_report([perfect_forest, shallow], distinct_data)
        assert [r.model for r in reports] == ["forest", "forest_2"]
        assert reports[0].accuracy == 1.0
        assert reports[1].accuracy < 1.0

    def test_report_names(self):
        """Test that repeated ids are suffixed in order without collisions."""
        assert report_names(["gbm", "forest", "gbm"]) == ["gbm", "forest", "gbm_2"]
        assert report_names(["forest", "forest_2", "forest"]) == ["forest", "forest_2", "forest_3"]

    def test_undefined_metrics_are_null(self, rng, tmp_path):
        """Test that a class absent from labels and predictions is written as null, not 0."""
        data = make_dataset(rng.standard_normal((50, 2)), np.arange(50) % 5)
        model = fit_model("forest", data, EXACT_TREE, seed=0)
        [report] = build_report({"memorised": model}, data)
        payload = json.loads(write_report_json([report], tmp_path / "report.json").read_text())
        absent = payload["models"][0]["per_class"][5]
        assert absent["precision"] is None
        assert absent["recall"] is None
        assert absent["support"] == 0

        frame = pd.read_csv(write_report_csv([report], tmp_path / "report.csv"))
        assert np.isnan(frame.loc[5, "precision"])
        assert "n/a" in format_report_text(report)


@pytest.mark.slow
class TestImbalanceExperiment:
    """Test the majority-class comparison on synthetic households."""

    def test_forest_overpredicts_zero(self):
        """Test that the forest's argmax inflates the zero-delivery share."""
        result = imbalance_experiment(default_synthetic_spec(), 1000, range(10))
        assert result.forest_overpredicts_zero >= 8
        assert len(result.tv_probit) == 10
