"""
Shapley-value explanations of per-class predicted probabilities.

The value of a coalition S is the mean prediction over a background sample
with the explained row's values substituted on S. Exact values enumerate all
2^p coalitions; sampled values average marginal contributions over random
feature orderings. Models are reached only through a vectorized prediction
function mapping an m×p matrix to m×K outputs.

All values are on the probability scale.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from delivery.config import SHAP_BACKGROUND_SIZE, SHAP_EXACT_MAX_FEATURES, SHAP_PERMUTATIONS

logger = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]
SCALE = "probability"
# Upper bound on composite rows sent to the model in one call
BATCH_ROWS = 65536


class EnumerationLimitError(ValueError):
    """Exact enumeration refused because there are too many features."""


@dataclass(frozen=True, eq=False)
class ShapExplanation:
    """
    Attribution of one observation's predictions.

    values[j, c] is φ_j for class c; base_values[c] is φ₀; prediction[c] is
    the model output for the observation. standard_errors is set for the
    sampled method only.
    """

    x: np.ndarray
    base_values: np.ndarray
    values: np.ndarray
    prediction: np.ndarray
    method: str
    background_size: int
    feature_names: Tuple[str, ...]
    standard_errors: Optional[np.ndarray] = None
    n_permutations: Optional[int] = None
    seed: Optional[int] = None

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.values.shape[1]

    def additivity_gap(self) -> np.ndarray:
        """φ₀ + Σφ − prediction per class."""
        return self.base_values + self.values.sum(axis=0) - self.prediction


def _predict(model_predict: PredictFn, rows: np.ndarray) -> np.ndarray:
    out = np.asarray(model_predict(rows), dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.shape[0] != rows.shape[0]:
        raise ValueError(f"Prediction function returned {out.shape[0]} rows for {rows.shape[0]} inputs")
    return out


def _prepare(x, background) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim == 1:
        background = background.reshape(1, -1)
    if background.shape[0] < 1:
        raise ValueError("Background sample is empty")
    if background.shape[1] != x.shape[0]:
        raise ValueError(f"Background has {background.shape[1]} features, observation has {x.shape[0]}")
    return x, background


def _coalition_values(model_predict: PredictFn, x: np.ndarray, background: np.ndarray, coalitions: np.ndarray) -> np.ndarray:
    """Mean background prediction with x substituted on each boolean coalition row."""
    b, p = background.shape
    per_call = max(1, BATCH_ROWS // b)
    values = []
    for start in range(0, coalitions.shape[0], per_call):
        chunk = coalitions[start:start + per_call]
        composite = np.where(chunk[:, None, :], x[None, None, :], background[None, :, :])
        predictions = _predict(model_predict, composite.reshape(-1, p))
        values.append(predictions.reshape(chunk.shape[0], b, -1).mean(axis=1))
    return np.concatenate(values, axis=0)


def _names(feature_names, p: int) -> Tuple[str, ...]:
    if feature_names is None:
        return tuple(f"x{j}" for j in range(p))
    if len(feature_names) != p:
        raise ValueError(f"{len(feature_names)} feature names for {p} features")
    return tuple(feature_names)


def shap_exact(
    model_predict: PredictFn,
    x: Sequence[float],
    background: np.ndarray,
    feature_names: Optional[Sequence[str]] = None,
    max_features: int = SHAP_EXACT_MAX_FEATURES,
) -> ShapExplanation:
    """Shapley values by enumerating every coalition."""
    x, background = _prepare(x, background)
    p = x.shape[0]
    if p > max_features:
        raise EnumerationLimitError(
            f"Exact enumeration supports at most {max_features} features, got {p}; "
            f"use the sampled method (--method sampled) instead"
        )

    masks = np.arange(2 ** p, dtype=np.int64)
    members = ((masks[:, None] >> np.arange(p)) & 1).astype(bool)
    sizes = members.sum(axis=1)
    value = _coalition_values(model_predict, x, background, members)

    weights = np.array([
        math.factorial(s) * math.factorial(p - s - 1) / math.factorial(p) for s in range(p)
    ])
    phi = np.zeros((p, value.shape[1]))
    for j in range(p):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[j] = (weights[sizes[without]][:, None] * (value[without | bit] - value[without])).sum(axis=0)

    return ShapExplanation(
        x=x,
        base_values=value[0],
        values=phi,
        prediction=value[-1],
        method="exact",
        background_size=background.shape[0],
        feature_names=_names(feature_names, p),
    )


def shap_sampled(
    model_predict: PredictFn,
    x: Sequence[float],
    background: np.ndarray,
    n_permutations: int = SHAP_PERMUTATIONS,
    seed: Union[int, Sequence[int], None] = 0,
    feature_names: Optional[Sequence[str]] = None,
) -> ShapExplanation:
    """
    Permutation-sampling estimate with per-feature standard errors.

    Each ordering contributes v(predecessors ∪ {j}) − v(predecessors) for every
    feature; contributions along one ordering telescope to prediction − φ₀.
    """
    if n_permutations < 1:
        raise ValueError(f"n_permutations must be >= 1, got {n_permutations}")
    x, background = _prepare(x, background)
    p = x.shape[0]
    rng = np.random.default_rng(seed)
    orderings = [rng.permutation(p) for _ in range(n_permutations)]

    # Prefix coalitions of sizes 0..p for every ordering, evaluated in one pass
    prefixes = np.zeros((n_permutations, p + 1, p), dtype=bool)
    for t, order in enumerate(orderings):
        for r in range(p):
            prefixes[t, r + 1:, order[r]] = True
    value = _coalition_values(model_predict, x, background, prefixes.reshape(-1, p))
    value = value.reshape(n_permutations, p + 1, -1)

    contributions = np.zeros((n_permutations, p, value.shape[2]))
    steps = np.diff(value, axis=1)
    for t, order in enumerate(orderings):
        contributions[t, order] = steps[t]

    estimate = contributions.mean(axis=0)
    if n_permutations > 1:
        errors = contributions.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    else:
        errors = np.zeros_like(estimate)

    return ShapExplanation(
        x=x,
        base_values=value[0, 0],
        values=estimate,
        prediction=value[0, -1],
        method="sampled",
        background_size=background.shape[0],
        feature_names=_names(feature_names, p),
        standard_errors=errors,
        n_permutations=n_permutations,
        seed=seed if seed is None or isinstance(seed, int) else int(seed[0]),
    )


def sample_background(rows: np.ndarray, size: int = SHAP_BACKGROUND_SIZE, seed: int = 0) -> np.ndarray:
    """Rows drawn without replacement, kept in their original order."""
    rows = np.asarray(rows, dtype=np.float64)
    if size < 1:
        raise ValueError(f"Background size must be >= 1, got {size}")
    if size >= rows.shape[0]:
        return rows.copy()
    chosen = np.sort(np.random.default_rng(seed).choice(rows.shape[0], size=size, replace=False))
    return rows[chosen]


def explain_dataset(
    model_predict: PredictFn,
    rows: np.ndarray,
    background: np.ndarray,
    method: str = "exact",
    n_permutations: int = SHAP_PERMUTATIONS,
    seed: int = 0,
    feature_names: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> List[ShapExplanation]:
    """Explain every row; sampled row i uses the stream (seed, i)."""
    rows = np.asarray(rows, dtype=np.float64)
    if method == "exact":
        if rows.shape[1] > SHAP_EXACT_MAX_FEATURES:
            raise EnumerationLimitError(
                f"Exact enumeration supports at most {SHAP_EXACT_MAX_FEATURES} features, got {rows.shape[1]}; "
                f"use the sampled method (--method sampled) instead"
            )
        jobs = (delayed(shap_exact)(model_predict, row, background, feature_names) for row in rows)
    elif method == "sampled":
        jobs = (
            delayed(shap_sampled)(model_predict, row, background, n_permutations, [seed, i], feature_names)
            for i, row in enumerate(rows)
        )
    else:
        raise ValueError(f"Unknown explanation method '{method}' (expected exact or sampled)")

    explanations = Parallel(n_jobs=n_jobs)(jobs)
    logger.info(f"Explained {len(explanations)} observations ({method})")
    return explanations


# =============================================================================
# GLOBAL IMPORTANCE AND DEPENDENCE TABLES
# =============================================================================

@dataclass(frozen=True, eq=False)
class ImportanceRanking:
    """per_class[j, c] = Σᵢ |φ_j,c|; total[j] sums over classes; order is descending by total."""

    feature_names: Tuple[str, ...]
    per_class: np.ndarray
    total: np.ndarray
    order: Tuple[int, ...]

    @property
    def ranked_features(self) -> List[str]:
        return [self.feature_names[j] for j in self.order]


def _check_consistent(explanations: Sequence[ShapExplanation]) -> None:
    if not explanations:
        raise ValueError("No explanations given")
    first = explanations[0]
    for explanation in explanations[1:]:
        if explanation.feature_names != first.feature_names or explanation.values.shape != first.values.shape:
            raise ValueError("Explanations have inconsistent feature sets")


def global_importance(explanations: Sequence[ShapExplanation]) -> ImportanceRanking:
    _check_consistent(explanations)
    per_class = np.sum([np.abs(e.values) for e in explanations], axis=0)
    total = per_class.sum(axis=1)
    order = tuple(int(j) for j in np.argsort(-total, kind="stable"))
    return ImportanceRanking(
        feature_names=explanations[0].feature_names,
        per_class=per_class,
        total=total,
        order=order,
    )


def dependence_table(
    explanations: Sequence[ShapExplanation],
    feature: Union[str, int],
    class_index: int,
) -> pd.DataFrame:
    """One row per observation (feature value, φ), sorted by feature value."""
    _check_consistent(explanations)
    names = explanations[0].feature_names
    j = names.index(feature) if isinstance(feature, str) else int(feature)
    if not 0 <= j < len(names):
        raise ValueError(f"Feature index {j} out of range")
    if not 0 <= class_index < explanations[0].n_outputs:
        raise ValueError(f"Class {class_index} out of range")

    frame = pd.DataFrame({
        "observation": np.arange(len(explanations)),
        "feature": names[j],
        "feature_value": [e.x[j] for e in explanations],
        "shap_value": [e.values[j, class_index] for e in explanations],
        "class": class_index,
        "scale": SCALE,
    })
    return frame.sort_values(["feature_value", "observation"], kind="stable").reset_index(drop=True)


def importance_frame(ranking: ImportanceRanking) -> pd.DataFrame:
    rank = np.empty(len(ranking.order), dtype=np.int64)
    rank[list(ranking.order)] = np.arange(1, len(ranking.order) + 1)
    frame = pd.DataFrame({"feature": ranking.feature_names})
    for c in range(ranking.per_class.shape[1]):
        frame[f"importance_class_{c}"] = ranking.per_class[:, c]
    frame["importance_total"] = ranking.total
    frame["rank"] = rank
    frame["scale"] = SCALE
    return frame.sort_values("rank", kind="stable").reset_index(drop=True)


def write_importance_csv(ranking: ImportanceRanking, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    importance_frame(ranking).to_csv(path, index=False, lineterminator="\n")
    return path


def write_dependence_csv(explanations: Sequence[ShapExplanation], feature: Union[str, int], path: Union[str, Path]) -> Path:
    """Dependence rows for every class of one feature, stacked class by class."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = [dependence_table(explanations, feature, c) for c in range(explanations[0].n_outputs)]
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, lineterminator="\n")
    return path
