"""
Random forest and gradient-boosted tree classifiers for the six delivery classes.

Both ensembles derive one random stream per tree from (seed, tree index) or
(seed, round, class), so n_jobs never changes the fitted model.

Usage:
    from delivery.ensembles import ForestParams, fit_random_forest, forest_predict

    forest = fit_random_forest(train, ForestParams(n_trees=100), seed=7, n_jobs=4)
    labels = forest_predict(forest, test.rows)
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.special import logsumexp, softmax

from delivery.config import FOREST_DEFAULTS, GBM_DEFAULTS, N_CLASSES
from delivery.data_model import Dataset
from delivery.trees import DecisionTree, TreeParams, fit_tree

logger = logging.getLogger(__name__)

BASE_SCORE_FLOOR = 1e-6


def _params_from_mapping(cls, values: Optional[Mapping]):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} settings: {', '.join(unknown)}")
    return cls(**values)


def _check_matrix(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"Dimension mismatch: model expects {n_features} features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("Feature values must be finite")
    return X


def majority_vote(votes: Sequence[int]) -> int:
    """Plurality class among tree votes; ties go to the lowest class."""
    return int(np.argmax(np.bincount(np.asarray(votes, dtype=np.int64), minlength=N_CLASSES)))


# =============================================================================
# RANDOM FOREST
# =============================================================================

@dataclass(frozen=True)
class ForestParams:
    n_trees: int = FOREST_DEFAULTS["n_trees"]
    max_depth: Optional[int] = FOREST_DEFAULTS["max_depth"]
    min_samples_leaf: int = FOREST_DEFAULTS["min_samples_leaf"]
    # None means ceil(sqrt(p))
    features_per_split: Optional[int] = FOREST_DEFAULTS["features_per_split"]
    bootstrap_fraction: float = FOREST_DEFAULTS["bootstrap_fraction"]
    bootstrap: bool = FOREST_DEFAULTS["bootstrap"]

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError(f"features_per_split must be >= 1, got {self.features_per_split}")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError(f"bootstrap_fraction must be in (0, 1], got {self.bootstrap_fraction}")

    @classmethod
    def from_mapping(cls, values: Optional[Mapping]) -> "ForestParams":
        return _params_from_mapping(cls, values)

    def resolved_features_per_split(self, p: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(math.sqrt(p)))
        if self.features_per_split > p:
            raise ValueError(f"features_per_split={self.features_per_split} exceeds feature count {p}")
        return self.features_per_split


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: Tuple[DecisionTree, ...]
    params: ForestParams
    n_features: int
    seed: int

    def importances(self) -> np.ndarray:
        """Gini reduction per feature summed over trees, normalised to sum 1."""
        total = np.zeros(self.n_features)
        for tree in self.trees:
            total += tree.importances(self.n_features)
        mass = total.sum()
        return total / mass if mass > 0 else total


def _fit_forest_tree(X, y, params: ForestParams, per_split: int, seed: int, index: int) -> DecisionTree:
    rng = np.random.default_rng([seed, index])
    n = X.shape[0]
    if params.bootstrap:
        size = max(1, int(math.floor(params.bootstrap_fraction * n + 0.5)))
        rows = rng.integers(0, n, size=size)
    else:
        rows = np.arange(n)
    tree_params = TreeParams(
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        features_per_split=per_split,
    )
    return fit_tree(X, labels=y, params=tree_params, seed=rng, rows=rows)


def fit_random_forest(
    data: Dataset,
    params: Union[ForestParams, Mapping, None] = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> RandomForestModel:
    """Bagged Gini trees with features re-drawn at every split."""
    if not isinstance(params, ForestParams):
        params = ForestParams.from_mapping(params)
    per_split = params.resolved_features_per_split(data.p)
    X = np.ascontiguousarray(data.rows)
    y = np.ascontiguousarray(data.labels)

    trees = Parallel(n_jobs=n_jobs)(
        delayed(_fit_forest_tree)(X, y, params, per_split, seed, t) for t in range(params.n_trees)
    )
    logger.info(f"Random forest: {params.n_trees} trees, {per_split} features per split")
    return RandomForestModel(trees=tuple(trees), params=params, n_features=data.p, seed=seed)


def forest_votes(model: RandomForestModel, X) -> np.ndarray:
    """n×6 vote counts."""
    X = _check_matrix(X, model.n_features)
    votes = np.zeros((X.shape[0], N_CLASSES), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for tree in model.trees:
        votes[rows, tree.predict(X)] += 1
    return votes


def forest_predict_proba(model: RandomForestModel, X) -> np.ndarray:
    """Vote shares per class; rows sum to 1."""
    return forest_votes(model, X) / len(model.trees)


def forest_predict(model: RandomForestModel, X) -> np.ndarray:
    return np.argmax(forest_votes(model, X), axis=1)


# =============================================================================
# GRADIENT BOOSTING
# =============================================================================

@dataclass(frozen=True)
class GBMParams:
    n_rounds: int = GBM_DEFAULTS["n_rounds"]
    learning_rate: float = GBM_DEFAULTS["learning_rate"]
    max_depth: Optional[int] = GBM_DEFAULTS["max_depth"]
    lambda_l2: float = GBM_DEFAULTS["lambda_l2"]
    gamma_split: float = GBM_DEFAULTS["gamma_split"]
    column_subsample: float = GBM_DEFAULTS["column_subsample"]
    min_child_weight: float = GBM_DEFAULTS["min_child_weight"]
    min_samples_leaf: int = GBM_DEFAULTS["min_samples_leaf"]

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError(f"n_rounds must be >= 1, got {self.n_rounds}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if not 0.0 < self.column_subsample <= 1.0:
            raise ValueError(f"column_subsample must be in (0, 1], got {self.column_subsample}")
        if self.lambda_l2 < 0 or self.gamma_split < 0 or self.min_child_weight < 0:
            raise ValueError("lambda_l2, gamma_split and min_child_weight must be >= 0")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")

    @classmethod
    def from_mapping(cls, values: Optional[Mapping]) -> "GBMParams":
        return _params_from_mapping(cls, values)


@dataclass(frozen=True, eq=False)
class GradientBoostedModel:
    """
    Per-round tuples of six regression trees, one per class.

    loss_history[0] is the training cross-entropy of the base score alone;
    loss_history[r] is the loss after r rounds.
    """

    trees: Tuple[Tuple[DecisionTree, ...], ...]
    base_score: np.ndarray
    params: GBMParams
    n_features: int
    seed: int
    loss_history: Tuple[float, ...] = field(default_factory=tuple)

    def importances(self) -> np.ndarray:
        """Second-order gain per feature summed over all trees, normalised to sum 1."""
        total = np.zeros(self.n_features)
        for round_trees in self.trees:
            for tree in round_trees:
                total += tree.importances(self.n_features)
        mass = total.sum()
        return total / mass if mass > 0 else total


def softmax_grad_hess(scores: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient p − onehot(y) and diagonal hessian p(1 − p) of softmax cross-entropy."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    probs = softmax(scores, axis=1)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return probs - onehot, probs * (1.0 - probs)


def cross_entropy(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Mean softmax cross-entropy of class scores against labels."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return float(np.mean(logsumexp(scores, axis=1) - scores[np.arange(labels.shape[0]), labels]))


def base_scores(labels: Sequence[int]) -> np.ndarray:
    """Log training class frequencies, floored at 1e-6."""
    labels = np.asarray(labels, dtype=np.int64)
    frequencies = np.bincount(labels, minlength=N_CLASSES) / labels.shape[0]
    return np.log(np.maximum(frequencies, BASE_SCORE_FLOOR))


def _fit_class_tree(X, grad, hess, params: GBMParams, seed: int, round_index: int, class_index: int) -> DecisionTree:
    rng = np.random.default_rng([seed, round_index, class_index])
    p = X.shape[1]
    n_columns = max(1, int(math.floor(params.column_subsample * p + 0.5)))
    columns = np.arange(p) if n_columns >= p else np.sort(rng.choice(p, size=n_columns, replace=False))
    tree_params = TreeParams(
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        min_child_weight=params.min_child_weight,
        lambda_l2=params.lambda_l2,
        gamma_split=params.gamma_split,
        leaf_scale=params.learning_rate,
    )
    return fit_tree(X, grad_hess=(grad, hess), params=tree_params, column_mask=columns)


def fit_gbm(
    data: Dataset,
    params: Union[GBMParams, Mapping, None] = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> GradientBoostedModel:
    """Multiclass boosting with one second-order regression tree per class per round."""
    if not isinstance(params, GBMParams):
        params = GBMParams.from_mapping(params)
    X = np.ascontiguousarray(data.rows)
    y = data.labels
    base = base_scores(y)
    scores = np.tile(base, (data.n, 1))
    history = [cross_entropy(scores, y)]
    rounds = []

    with Parallel(n_jobs=n_jobs) as parallel:
        for r in range(params.n_rounds):
            grad, hess = softmax_grad_hess(scores, y)
            round_trees = parallel(
                delayed(_fit_class_tree)(X, np.ascontiguousarray(grad[:, c]), np.ascontiguousarray(hess[:, c]), params, seed, r, c)
                for c in range(N_CLASSES)
            )
            for c, tree in enumerate(round_trees):
                scores[:, c] += tree.predict_value(X)[:, 0]
            rounds.append(tuple(round_trees))
            history.append(cross_entropy(scores, y))
            logger.debug(f"Boosting round {r + 1}: training loss {history[-1]:.6f}")

    logger.info(f"Gradient boosting: {params.n_rounds} rounds, final training loss {history[-1]:.4f}")
    return GradientBoostedModel(
        trees=tuple(rounds),
        base_score=base,
        params=params,
        n_features=data.p,
        seed=seed,
        loss_history=tuple(history),
    )


def gbm_scores(model: GradientBoostedModel, X, rounds: Optional[int] = None) -> np.ndarray:
    """Summed class scores, optionally truncated to the first `rounds` rounds (0 = base score)."""
    X = _check_matrix(X, model.n_features)
    rounds = len(model.trees) if rounds is None else rounds
    if not 0 <= rounds <= len(model.trees):
        raise ValueError(f"rounds must be in [0, {len(model.trees)}], got {rounds}")
    scores = np.tile(model.base_score, (X.shape[0], 1))
    for round_trees in model.trees[:rounds]:
        for c, tree in enumerate(round_trees):
            scores[:, c] += tree.predict_value(X)[:, 0]
    return scores


def gbm_predict_proba(model: GradientBoostedModel, X, rounds: Optional[int] = None) -> np.ndarray:
    return softmax(gbm_scores(model, X, rounds), axis=1)


def gbm_predict(model: GradientBoostedModel, X, rounds: Optional[int] = None) -> np.ndarray:
    return np.argmax(gbm_scores(model, X, rounds), axis=1)


# =============================================================================
# TEXT SERIALIZATION
# =============================================================================

def _params_line(params) -> str:
    items = []
    for key, value in asdict(params).items():
        items.append(f"{key}={'none' if value is None else repr(value)}")
    return "params " + " ".join(items)


def _parse_params_line(cls, line: str):
    if not line.startswith("params"):
        raise ValueError(f"Expected a params line, got {line!r}")
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for item in line.split()[1:]:
        key, raw = item.split("=", 1)
        if raw == "none":
            values[key] = None
        elif raw in ("True", "False"):
            values[key] = raw == "True"
        elif key in types and "float" in str(types[key]):
            values[key] = float(raw)
        else:
            values[key] = int(raw)
    return _params_from_mapping(cls, values)


def _read_trees(lines: Sequence[str], start: int, count: int) -> Tuple[List[DecisionTree], int]:
    trees = []
    position = start
    for _ in range(count):
        header = lines[position]
        n_nodes = int(dict(item.split("=", 1) for item in header.split()[1:])["n_nodes"])
        trees.append(DecisionTree.from_lines(lines[position:position + n_nodes + 1]))
        position += n_nodes + 1
    return trees, position


def forest_to_lines(model: RandomForestModel) -> List[str]:
    lines = [f"forest n_trees={len(model.trees)} n_features={model.n_features} seed={model.seed}", _params_line(model.params)]
    for tree in model.trees:
        lines.extend(tree.to_lines())
    return lines


def forest_from_lines(lines: Sequence[str]) -> RandomForestModel:
    header = dict(item.split("=", 1) for item in lines[0].split()[1:])
    params = _parse_params_line(ForestParams, lines[1])
    trees, _ = _read_trees(lines, 2, int(header["n_trees"]))
    return RandomForestModel(trees=tuple(trees), params=params, n_features=int(header["n_features"]), seed=int(header["seed"]))


def gbm_to_lines(model: GradientBoostedModel) -> List[str]:
    lines = [
        f"gbm n_rounds={len(model.trees)} n_features={model.n_features} seed={model.seed}",
        _params_line(model.params),
        "base_score " + ",".join(repr(float(v)) for v in model.base_score),
        "loss_history " + ",".join(repr(float(v)) for v in model.loss_history),
    ]
    for round_trees in model.trees:
        for tree in round_trees:
            lines.extend(tree.to_lines())
    return lines


def gbm_from_lines(lines: Sequence[str]) -> GradientBoostedModel:
    header = dict(item.split("=", 1) for item in lines[0].split()[1:])
    params = _parse_params_line(GBMParams, lines[1])
    base = np.array([float(v) for v in lines[2].split()[1].split(",")])
    history_parts = lines[3].split()
    history = tuple(float(v) for v in history_parts[1].split(",")) if len(history_parts) > 1 else ()

    n_rounds = int(header["n_rounds"])
    flat, _ = _read_trees(lines, 4, n_rounds * N_CLASSES)
    rounds = tuple(tuple(flat[r * N_CLASSES:(r + 1) * N_CLASSES]) for r in range(n_rounds))
    return GradientBoostedModel(
        trees=rounds,
        base_score=base,
        params=params,
        n_features=int(header["n_features"]),
        seed=int(header["seed"]),
        loss_history=history,
    )
