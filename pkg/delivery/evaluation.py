"""
Held-out evaluation of delivery-frequency models.

Confusion matrices, per-class precision and recall, overall accuracy, and the
aggregate class-share comparison between predicted and observed test labels.
Undefined precision or recall (empty denominator) is None, never 0.

Usage:
    from delivery.evaluation import build_report, write_report_json

    reports = build_report({"probit": probit_model, "forest": forest_model}, test)
    write_report_json(reports, "outputs/report.json")
"""

import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from delivery.config import CLASSES, N_CLASSES, TRAIN_FRACTION
from delivery.data_model import Dataset, SyntheticSpec, generate_synthetic, split_train_test
from delivery.families import FittedModel, fit_model

logger = logging.getLogger(__name__)


def format_pct(value: float, decimals: int = 1) -> str:
    """Format a share in [0, 1] as a percentage."""
    return f"{value * 100:.{decimals}f}%"


# =============================================================================
# CONFUSION MATRIX AND PER-CLASS METRICS
# =============================================================================

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """6×6 counts indexed by (true class, predicted class)."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.shape != (N_CLASSES, N_CLASSES) or np.any(counts < 0):
            raise ValueError("Confusion matrix must be a non-negative 6×6 count matrix")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def n_total(self) -> int:
        return int(self.counts.sum())


def _labels(values: Sequence[int], name: str) -> np.ndarray:
    array = np.asarray(values)
    if array.ndim != 1:
        raise ValueError(f"{name} must be a label vector")
    if array.size and (array.dtype.kind == "f" and np.any(array != np.round(array))):
        raise ValueError(f"{name} contains non-integer labels")
    array = array.astype(np.int64)
    if np.any((array < 0) | (array >= N_CLASSES)):
        bad = array[(array < 0) | (array >= N_CLASSES)][0]
        raise ValueError(f"{name} contains label {bad} outside 0..{N_CLASSES - 1}")
    return array


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int]) -> ConfusionMatrix:
    y_true = _labels(y_true, "y_true")
    y_pred = _labels(y_pred, "y_pred")
    if y_true.shape[0] != y_pred.shape[0]:
        raise ValueError(f"Length mismatch: {y_true.shape[0]} true labels vs {y_pred.shape[0]} predictions")
    if y_true.shape[0] == 0:
        raise ValueError("Cannot build a confusion matrix from empty inputs")
    counts = np.bincount(y_true * N_CLASSES + y_pred, minlength=N_CLASSES * N_CLASSES)
    return ConfusionMatrix(counts.reshape(N_CLASSES, N_CLASSES))


@dataclass(frozen=True)
class ClassMetrics:
    label: int
    precision: Optional[float]
    recall: Optional[float]
    support: int
    predicted: int


def precision_recall(matrix: ConfusionMatrix) -> List[ClassMetrics]:
    """precision_c = diag/column sum, recall_c = diag/row sum; None when the sum is 0."""
    counts = matrix.counts
    actual = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    metrics = []
    for c in CLASSES:
        correct = counts[c, c]
        metrics.append(ClassMetrics(
            label=c,
            precision=float(correct / predicted[c]) if predicted[c] > 0 else None,
            recall=float(correct / actual[c]) if actual[c] > 0 else None,
            support=int(actual[c]),
            predicted=int(predicted[c]),
        ))
    return metrics


def overall_accuracy(matrix: ConfusionMatrix) -> float:
    if matrix.n_total < 1:
        raise ValueError("Accuracy is undefined for an empty confusion matrix")
    return float(np.trace(matrix.counts) / matrix.n_total)


def recall_heatmap(matrix: ConfusionMatrix) -> np.ndarray:
    """Row-normalized counts; rows without true observations are NaN."""
    actual = matrix.counts.sum(axis=1, keepdims=True).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(actual > 0, matrix.counts / actual, np.nan)


# =============================================================================
# AGGREGATE SHARES
# =============================================================================

def aggregate_shares(labels: Sequence[int]) -> np.ndarray:
    labels = _labels(labels, "labels")
    if labels.shape[0] == 0:
        raise ValueError("Cannot compute shares of an empty label vector")
    return np.bincount(labels, minlength=N_CLASSES) / labels.shape[0]


def tv_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Total-variation distance ½ Σ|a_c − b_c|."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Share vectors differ in length: {a.shape} vs {b.shape}")
    return float(0.5 * np.sum(np.abs(a - b)))


def share_deltas(predicted: Sequence[float], observed: Sequence[float]) -> Tuple[List[float], List[Optional[float]]]:
    """Absolute (percentage-point) and relative deltas per class; relative is None where observed is 0."""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    absolute = [float(d) for d in predicted - observed]
    relative = [
        float((p - o) / o) if o > 0 else None
        for p, o in zip(predicted, observed)
    ]
    return absolute, relative


# =============================================================================
# REPORTS
# =============================================================================

@dataclass(frozen=True, eq=False)
class ModelReport:
    model: str
    family: str
    dataset: str
    seed: int
    matrix: ConfusionMatrix
    per_class: List[ClassMetrics]
    accuracy: float
    observed_shares: np.ndarray
    predicted_shares_argmax: np.ndarray
    predicted_shares_expected: Optional[np.ndarray]
    tv_argmax: float
    tv_expected: Optional[float]
    absolute_deltas: List[float] = field(default_factory=list)
    relative_deltas: List[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        expected = self.predicted_shares_expected
        return {
            "model": self.model,
            "family": self.family,
            "dataset": self.dataset,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "n_total": self.matrix.n_total,
            "confusion_matrix": self.matrix.counts.tolist(),
            "per_class": [
                {"class": m.label, "precision": m.precision, "recall": m.recall, "support": m.support}
                for m in self.per_class
            ],
            "observed_shares": [float(v) for v in self.observed_shares],
            "predicted_shares_argmax": [float(v) for v in self.predicted_shares_argmax],
            "predicted_shares_expected": None if expected is None else [float(v) for v in expected],
            "tv_argmax": self.tv_argmax,
            "tv_expected": self.tv_expected,
            "share_delta_absolute": self.absolute_deltas,
            "share_delta_relative": self.relative_deltas,
        }


def evaluate_model(
    name: str,
    model: FittedModel,
    test_data: Dataset,
    dataset_id: str = "test",
    seed: int = 0,
) -> ModelReport:
    """Score one fitted model on a held-out dataset."""
    probabilities = model.predict_proba(test_data)
    predicted = np.argmax(probabilities, axis=1)
    matrix = confusion_matrix(test_data.labels, predicted)
    observed = aggregate_shares(test_data.labels)
    argmax_shares = aggregate_shares(predicted)

    expected = None
    tv_expected = None
    if model.spec.expected_shares:
        expected = probabilities.mean(axis=0)
        tv_expected = tv_distance(expected, observed)

    absolute, relative = share_deltas(argmax_shares, observed)
    report = ModelReport(
        model=name,
        family=model.family,
        dataset=dataset_id,
        seed=seed,
        matrix=matrix,
        per_class=precision_recall(matrix),
        accuracy=overall_accuracy(matrix),
        observed_shares=observed,
        predicted_shares_argmax=argmax_shares,
        predicted_shares_expected=expected,
        tv_argmax=tv_distance(argmax_shares, observed),
        tv_expected=tv_expected,
        absolute_deltas=absolute,
        relative_deltas=relative,
    )
    logger.info(f"{name}: accuracy {report.accuracy:.4f}, TV(argmax) {report.tv_argmax:.4f}")
    return report


def report_names(names: Sequence[str]) -> List[str]:
    """Unique report ids: repeats of a name get _2, _3, ... in order."""
    used = set()
    unique = []
    for name in names:
        candidate = name
        suffix = 2
        while candidate in used:
            candidate = f"{name}_{suffix}"
            suffix += 1
        used.add(candidate)
        unique.append(candidate)
    return unique


def build_report(
    models: Union[Mapping[str, FittedModel], Sequence[FittedModel]],
    test_data: Dataset,
    dataset_id: str = "test",
    seed: int = 0,
) -> List[ModelReport]:
    """
    One report per model, in the given order. Raises ValueError on schema mismatch.

    A sequence is named by family; models sharing a family all get a report.
    """
    if isinstance(models, Mapping):
        named = list(models.items())
    else:
        models = list(models)
        named = list(zip(report_names([model.family for model in models]), models))
    return [evaluate_model(name, model, test_data, dataset_id, seed) for name, model in named]


def write_report_json(reports: Sequence[ModelReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"models": [r.to_dict() for r in reports]}, f, indent=2)
        f.write("\n")
    return path


def report_frame(reports: Sequence[ModelReport]) -> pd.DataFrame:
    """Flat table: one row per (model, class)."""
    rows = []
    for report in reports:
        expected = report.predicted_shares_expected
        for metrics in report.per_class:
            c = metrics.label
            rows.append({
                "model": report.model,
                "class": c,
                "precision": metrics.precision,
                "recall": metrics.recall,
                "support": metrics.support,
                "observed_share": report.observed_shares[c],
                "predicted_share_argmax": report.predicted_shares_argmax[c],
                "predicted_share_expected": None if expected is None else expected[c],
                "share_delta_absolute": report.absolute_deltas[c],
                "share_delta_relative": report.relative_deltas[c],
                "accuracy": report.accuracy,
                "tv_argmax": report.tv_argmax,
                "tv_expected": report.tv_expected,
            })
    return pd.DataFrame(rows)


def write_report_csv(reports: Sequence[ModelReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(reports).to_csv(path, index=False, lineterminator="\n")
    return path


def write_heatmap_csv(report: ModelReport, path: Union[str, Path]) -> Path:
    """Row-normalized confusion matrix with class labels on both axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        recall_heatmap(report.matrix),
        index=pd.Index(list(CLASSES), name="true"),
        columns=[str(c) for c in CLASSES],
    )
    frame.to_csv(path, na_rep="", lineterminator="\n")
    return path


def format_report_text(report: ModelReport) -> str:
    """Human-readable summary with one-decimal percentages."""
    lines = [
        f"{report.model} ({report.family})",
        f"  Overall accuracy: {format_pct(report.accuracy)}",
        f"  {'class':>5}  {'precision':>9}  {'recall':>7}  {'observed':>8}  {'predicted':>9}",
    ]
    for metrics in report.per_class:
        c = metrics.label
        precision = "n/a" if metrics.precision is None else format_pct(metrics.precision)
        recall = "n/a" if metrics.recall is None else format_pct(metrics.recall)
        lines.append(
            f"  {c:>5}  {precision:>9}  {recall:>7}  "
            f"{format_pct(report.observed_shares[c]):>8}  {format_pct(report.predicted_shares_argmax[c]):>9}"
        )
    lines.append(f"  TV distance (argmax): {report.tv_argmax:.4f}")
    if report.tv_expected is not None:
        lines.append(f"  TV distance (expected): {report.tv_expected:.4f}")
    return "\n".join(lines)


# =============================================================================
# IMBALANCE EXPERIMENT
# =============================================================================

@dataclass(frozen=True)
class ImbalanceResult:
    seeds: Tuple[int, ...]
    tv_probit: Tuple[float, ...]
    tv_forest: Tuple[float, ...]
    class0_delta_probit: Tuple[float, ...]
    class0_delta_forest: Tuple[float, ...]

    @property
    def median_tv_probit(self) -> float:
        return statistics.median(self.tv_probit)

    @property
    def median_tv_forest(self) -> float:
        return statistics.median(self.tv_forest)

    @property
    def forest_overpredicts_zero(self) -> int:
        """Replications where the forest's class-0 share exceeds the observed share."""
        return sum(1 for delta in self.class0_delta_forest if delta > 0)


def imbalance_experiment(
    spec: SyntheticSpec,
    n: int,
    seeds: Sequence[int],
    forest_params: Optional[Mapping] = None,
    train_fraction: float = TRAIN_FRACTION,
    n_jobs: int = 1,
) -> ImbalanceResult:
    """
    Compare argmax class shares of the ordered probit and the default random
    forest against observed test shares over seeded replications.
    """
    tv_probit, tv_forest, delta_probit, delta_forest = [], [], [], []
    for seed in seeds:
        data = generate_synthetic(spec, n, seed)
        train, test = split_train_test(data, train_fraction, seed=seed)
        observed = aggregate_shares(test.labels)
        for family, params, tvs, deltas in (
            ("probit", None, tv_probit, delta_probit),
            ("forest", forest_params, tv_forest, delta_forest),
        ):
            model = fit_model(family, train, params, seed=seed, n_jobs=n_jobs)
            shares = aggregate_shares(model.predict(test))
            tvs.append(tv_distance(shares, observed))
            deltas.append(float(shares[0] - observed[0]))
        logger.info(f"Imbalance replication seed={seed}: TV probit {tv_probit[-1]:.4f}, forest {tv_forest[-1]:.4f}")

    return ImbalanceResult(
        seeds=tuple(seeds),
        tv_probit=tuple(tv_probit),
        tv_forest=tuple(tv_forest),
        class0_delta_probit=tuple(delta_probit),
        class0_delta_forest=tuple(delta_forest),
    )
