"""
Stratified k-fold cross-validation, randomized hyper-parameter search and
recursive feature elimination for the three model families.

Folds, trials and the RFE loop are all driven by one integer seed; per-fold
and per-trial work may run in parallel without changing results.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed

from delivery.config import CV_FOLDS, RFE_TOLERANCE
from delivery.data_model import Dataset
from delivery.evaluation import confusion_matrix, overall_accuracy
from delivery.families import fit_model, get_family

logger = logging.getLogger(__name__)


# =============================================================================
# HYPER-PARAMETER DOMAINS
# =============================================================================

@dataclass(frozen=True)
class IntRange:
    low: int
    high: int

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"Empty integer range [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class RealRange:
    low: float
    high: float

    def __post_init__(self):
        if not self.low <= self.high:
            raise ValueError(f"Empty real range [{self.low}, {self.high}]")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Choice:
    options: Tuple[Any, ...]

    def __post_init__(self):
        if len(self.options) == 0:
            raise ValueError("Categorical choice needs at least one option")

    def sample(self, rng: np.random.Generator) -> Any:
        return self.options[int(rng.integers(len(self.options)))]


Range = Union[IntRange, RealRange, Choice]


def _parse_range(name: str, spec, p: Optional[int]) -> Range:
    if isinstance(spec, Mapping):
        if "choices" not in spec:
            raise ValueError(f"Domain entry '{name}' needs a 'choices' list or a [low, high] pair")
        return Choice(tuple(spec["choices"]))
    if not isinstance(spec, (list, tuple)) or len(spec) != 2:
        raise ValueError(f"Domain entry '{name}' must be [low, high] or {{choices: [...]}}, got {spec!r}")

    bounds = []
    for bound in spec:
        if bound == "p":
            if p is None:
                raise ValueError(f"Domain entry '{name}' uses 'p' but the feature count is unknown")
            bound = p
        bounds.append(bound)
    low, high = bounds
    if isinstance(low, bool) or isinstance(high, bool):
        raise ValueError(f"Domain entry '{name}' has boolean bounds")
    if isinstance(low, int) and isinstance(high, int):
        return IntRange(low, high)
    return RealRange(float(low), float(high))


@dataclass(frozen=True)
class HyperparamDomain:
    """Bounded range per hyper-parameter, sampled in declaration order."""

    ranges: Tuple[Tuple[str, Range], ...]

    def __post_init__(self):
        if len(self.ranges) == 0:
            raise ValueError("Hyper-parameter domain is empty")

    @classmethod
    def from_mapping(cls, mapping: Mapping, p: Optional[int] = None) -> "HyperparamDomain":
        """Parse {name: [low, high] | {choices: [...]}}; 'p' bounds become the feature count."""
        return cls(tuple((name, _parse_range(name, spec, p)) for name, spec in (mapping or {}).items()))

    @classmethod
    def load(cls, path: Union[str, Path], p: Optional[int] = None) -> "HyperparamDomain":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Domain file not found: {path}")
        with open(path) as f:
            return cls.from_mapping(yaml.safe_load(f) or {}, p)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.ranges]

    def sample(self, rng: np.random.Generator) -> Dict[str, Any]:
        return {name: spec.sample(rng) for name, spec in self.ranges}


# =============================================================================
# CROSS-VALIDATION
# =============================================================================

def kfold_indices(labels: Sequence[int], k: int, seed: int) -> List[np.ndarray]:
    """
    Stratified folds: each class's indices are shuffled, classes are
    concatenated in label order and dealt round-robin into k folds.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of rows ({n})")

    rng = np.random.default_rng(seed)
    dealt = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    assignment = np.empty(n, dtype=np.int64)
    assignment[dealt] = np.arange(n) % k
    return [np.flatnonzero(assignment == fold) for fold in range(k)]


@dataclass(frozen=True)
class CVResult:
    """Per-fold accuracies; failed folds hold None and are excluded from the mean."""

    fold_scores: Tuple[Optional[float], ...]
    mean: Optional[float]
    failures: Tuple[Tuple[int, str], ...] = ()

    @property
    def failed(self) -> bool:
        return len(self.failures) > 0


def _score_fold(family: str, hyperparams: Mapping, data: Dataset, validation: np.ndarray, seed: int) -> Tuple[Optional[float], Optional[str]]:
    mask = np.ones(data.n, dtype=bool)
    mask[validation] = False
    try:
        model = fit_model(family, data.take(np.flatnonzero(mask)), hyperparams, seed=seed)
        holdout = data.take(validation)
        return overall_accuracy(confusion_matrix(holdout.labels, model.predict(holdout))), None
    except Exception as e:
        return None, f"{type(e).__name__}: {e}"


def cross_validate(
    family: str,
    hyperparams: Optional[Mapping],
    data: Dataset,
    k: int = CV_FOLDS,
    seed: int = 0,
    n_jobs: int = 1,
) -> CVResult:
    """Overall accuracy on each stratified fold after training on its complement."""
    get_family(family)
    hyperparams = dict(hyperparams or {})
    folds = kfold_indices(data.labels, k, seed)
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_score_fold)(family, hyperparams, data, fold, seed) for fold in folds
    )

    scores = tuple(score for score, _ in outcomes)
    failures = tuple((i, error) for i, (_, error) in enumerate(outcomes) if error is not None)
    for i, error in failures:
        logger.warning(f"{family} fold {i + 1}/{k} failed: {error}")
    valid = [s for s in scores if s is not None]
    mean = float(np.mean(valid)) if valid else None
    return CVResult(fold_scores=scores, mean=mean, failures=failures)


# =============================================================================
# RANDOMIZED SEARCH
# =============================================================================

@dataclass(frozen=True)
class Trial:
    index: int
    params: Dict[str, Any]
    cv: CVResult

    @property
    def score(self) -> Optional[float]:
        return self.cv.mean


@dataclass(frozen=True)
class SearchResult:
    family: str
    best_params: Dict[str, Any]
    best_score: float
    best_index: int
    trials: Tuple[Trial, ...]


def randomized_search(
    family: str,
    domain: HyperparamDomain,
    n_draws: int,
    data: Dataset,
    k: int = CV_FOLDS,
    seed: int = 0,
    n_jobs: int = 1,
) -> SearchResult:
    """
    Evaluate n_draws uniform draws from the domain by cross-validation.

    All draws are taken up front from one generator, so the trial log is
    ordered by draw index whatever the execution order. The best trial is
    the highest mean accuracy, earliest draw on ties.
    """
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    get_family(family)
    rng = np.random.default_rng(seed)
    draws = [domain.sample(rng) for _ in range(n_draws)]

    results = Parallel(n_jobs=n_jobs)(
        delayed(cross_validate)(family, params, data, k, seed) for params in draws
    )
    trials = tuple(Trial(index=i, params=params, cv=cv) for i, (params, cv) in enumerate(zip(draws, results)))

    best = None
    for trial in trials:
        if trial.score is None:
            continue
        if best is None or trial.score > best.score:
            best = trial
    if best is None:
        raise RuntimeError(f"Every {family} trial failed on every fold")

    logger.info(f"Randomized search ({family}): best draw {best.index} with CV accuracy {best.score:.4f}")
    return SearchResult(
        family=family,
        best_params=dict(best.params),
        best_score=best.score,
        best_index=best.index,
        trials=trials,
    )


def trial_log_frame(result: SearchResult) -> pd.DataFrame:
    rows = []
    for trial in result.trials:
        row = {"draw": trial.index}
        row.update(trial.params)
        row["mean_accuracy"] = trial.score
        row["failed_folds"] = len(trial.cv.failures)
        rows.append(row)
    return pd.DataFrame(rows)


def write_trial_log(result: SearchResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trial_log_frame(result).to_csv(path, index=False, lineterminator="\n")
    return path


# =============================================================================
# RECURSIVE FEATURE ELIMINATION
# =============================================================================

@dataclass(frozen=True)
class StepScore:
    n_features: int
    mean_accuracy: float
    features: Tuple[str, ...]
    eliminated: Optional[str] = None


@dataclass(frozen=True)
class SelectionResult:
    """
    ranked_features: elimination order, least important first and most
        important last
    retained_features: the selected subset
    cv_score_per_step: one entry per evaluated feature count, largest first
    """

    ranked_features: Tuple[str, ...]
    retained_features: Tuple[str, ...]
    cv_score_per_step: Tuple[StepScore, ...]


class SelectionAborted(RuntimeError):
    """A model fit failed inside RFE; `partial` holds the steps completed so far."""

    def __init__(self, message: str, partial: SelectionResult):
        super().__init__(message)
        self.partial = partial


def _least_important(importances: np.ndarray) -> int:
    """Index of the smallest importance; ties eliminate the higher index."""
    lowest = np.min(importances)
    return int(np.flatnonzero(importances == lowest)[-1])


def _elimination_order(importances: np.ndarray) -> List[int]:
    remaining = list(range(importances.shape[0]))
    order = []
    while remaining:
        j = _least_important(importances[remaining])
        order.append(remaining.pop(j))
    return order


def _clamp_features_per_split(hyperparams: Dict[str, Any], n_features: int) -> Dict[str, Any]:
    """Cap a fixed per-split feature count at the current subset size."""
    value = hyperparams.get("features_per_split")
    if value is None or value <= n_features:
        return hyperparams
    return {**hyperparams, "features_per_split": n_features}


def rfe(
    family: str,
    hyperparams: Optional[Mapping],
    data: Dataset,
    k: int = CV_FOLDS,
    target_count: Optional[int] = None,
    seed: int = 0,
    n_jobs: int = 1,
    tolerance: float = RFE_TOLERANCE,
) -> SelectionResult:
    """
    Drop the least important feature one at a time, scoring every subset by CV.

    With target_count unset the loop runs down to one feature and retains the
    smallest subset whose CV accuracy is within `tolerance` of the best.
    """
    get_family(family)
    hyperparams = dict(hyperparams or {})
    features = list(data.feature_names)
    p = len(features)
    if target_count is not None and not 1 <= target_count <= p:
        raise ValueError(f"target_count must be in [1, {p}], got {target_count}")
    stop = 1 if target_count is None else target_count

    current = list(features)
    eliminated: List[str] = []
    steps: List[StepScore] = []

    def partial() -> SelectionResult:
        return SelectionResult(tuple(eliminated), tuple(current), tuple(steps))

    while True:
        subset = data.select(current)
        step_params = _clamp_features_per_split(hyperparams, len(current))
        try:
            model = fit_model(family, subset, step_params, seed=seed, n_jobs=n_jobs)
        except Exception as e:
            raise SelectionAborted(f"{family} fit failed with {len(current)} features: {e}", partial()) from e
        cv = cross_validate(family, step_params, subset, k, seed, n_jobs)
        if cv.mean is None:
            raise SelectionAborted(f"Every CV fold failed with {len(current)} features", partial())

        importances = np.asarray(model.importances(), dtype=np.float64)
        if len(current) == stop:
            steps.append(StepScore(len(current), cv.mean, tuple(current)))
            break
        j = _least_important(importances)
        steps.append(StepScore(len(current), cv.mean, tuple(current), eliminated=current[j]))
        logger.info(f"RFE {len(current)} features: CV accuracy {cv.mean:.4f}, eliminating {current[j]}")
        eliminated.append(current.pop(j))

    # Survivors are ranked by their final importance pass
    ranked = eliminated + [current[j] for j in _elimination_order(importances)]

    if target_count is not None:
        retained = tuple(current)
    else:
        best = max(step.mean_accuracy for step in steps)
        candidates = [step for step in steps if step.mean_accuracy >= best - tolerance]
        retained = min(candidates, key=lambda step: step.n_features).features

    return SelectionResult(
        ranked_features=tuple(ranked),
        retained_features=retained,
        cv_score_per_step=tuple(steps),
    )


def selection_frame(result: SelectionResult) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "n_features": step.n_features,
            "mean_accuracy": step.mean_accuracy,
            "eliminated": step.eliminated or "",
            "features": ";".join(step.features),
        }
        for step in result.cv_score_per_step
    ])


def write_selection(result: SelectionResult, steps_path: Union[str, Path], ranking_path: Union[str, Path]) -> Tuple[Path, Path]:
    """Step log CSV plus a ranking CSV (rank 1 = most important)."""
    steps_path = Path(steps_path)
    ranking_path = Path(ranking_path)
    steps_path.parent.mkdir(parents=True, exist_ok=True)
    selection_frame(result).to_csv(steps_path, index=False, lineterminator="\n")

    ranked = list(reversed(result.ranked_features))
    pd.DataFrame({
        "rank": range(1, len(ranked) + 1),
        "feature": ranked,
        "retained": [name in result.retained_features for name in ranked],
    }).to_csv(ranking_path, index=False, lineterminator="\n")
    return steps_path, ranking_path
