"""
CART decision trees for the forest and boosting ensembles.

Two kinds of tree share one array layout:

- classification: Gini split criterion, leaves hold a class distribution
- regression: second-order gain on (gradient, hessian) statistics with L2
  regularisation, leaves hold -G/(H+λ) scaled by the learning rate

Rows go left when x[feature] <= threshold. Candidate thresholds are midpoints
between consecutive distinct feature values; among equal gains the lower
feature index and then the lower threshold wins.

Gini trees split any impure node that has a valid threshold; boosting trees
split only on positive gain after γ.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit

from delivery.config import N_CLASSES
from delivery.data_model import Dataset

logger = logging.getLogger(__name__)

TREE_KINDS = ("classification", "regression")
# Minimum improvement for a split to count as better
GAIN_EPS = 1e-12


# =============================================================================
# SPLIT SEARCH (numba)
# =============================================================================

@njit(cache=True)
def _midpoint(low, high):
    threshold = 0.5 * (low + high)
    if threshold >= high:
        threshold = low
    return threshold


@njit(cache=True)
def _gini_split_search(X, y, rows, features, n_classes, min_samples_leaf):
    n = rows.shape[0]
    total = np.zeros(n_classes)
    for i in range(n):
        total[y[rows[i]]] += 1.0
    parent = 0.0
    for k in range(n_classes):
        parent += total[k] * total[k]
    parent /= n

    # Impure nodes take the best valid threshold even at zero gain
    best_gain = -np.inf
    best_feature = -1
    best_threshold = 0.0
    values = np.empty(n)
    left = np.empty(n_classes)

    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(n):
            values[i] = X[rows[i], f]
        order = np.argsort(values)
        left[:] = 0.0
        for i in range(n - 1):
            left[y[rows[order[i]]]] += 1.0
            n_left = i + 1
            n_right = n - n_left
            if n_left < min_samples_leaf:
                continue
            if n_right < min_samples_leaf:
                break
            current = values[order[i]]
            following = values[order[i + 1]]
            if current == following:
                continue
            sum_left = 0.0
            sum_right = 0.0
            for k in range(n_classes):
                sum_left += left[k] * left[k]
                right = total[k] - left[k]
                sum_right += right * right
            gain = sum_left / n_left + sum_right / n_right - parent
            if gain > best_gain + GAIN_EPS:
                best_gain = gain
                best_feature = f
                best_threshold = _midpoint(current, following)
    return best_feature, best_threshold, best_gain


@njit(cache=True)
def _second_order_split_search(X, grad, hess, rows, features, min_samples_leaf, min_child_weight, lambda_l2, gamma_split):
    n = rows.shape[0]
    g_total = 0.0
    h_total = 0.0
    for i in range(n):
        g_total += grad[rows[i]]
        h_total += hess[rows[i]]
    parent = g_total * g_total / (h_total + lambda_l2)

    best_gain = 0.0
    best_feature = -1
    best_threshold = 0.0
    values = np.empty(n)

    for fi in range(features.shape[0]):
        f = features[fi]
        for i in range(n):
            values[i] = X[rows[i], f]
        order = np.argsort(values)
        g_left = 0.0
        h_left = 0.0
        for i in range(n - 1):
            r = rows[order[i]]
            g_left += grad[r]
            h_left += hess[r]
            n_left = i + 1
            if n_left < min_samples_leaf or h_left < min_child_weight:
                continue
            if n - n_left < min_samples_leaf:
                break
            h_right = h_total - h_left
            if h_right < min_child_weight:
                break
            current = values[order[i]]
            following = values[order[i + 1]]
            if current == following:
                continue
            g_right = g_total - g_left
            gain = 0.5 * (
                g_left * g_left / (h_left + lambda_l2)
                + g_right * g_right / (h_right + lambda_l2)
                - parent
            ) - gamma_split
            if gain > best_gain + GAIN_EPS:
                best_gain = gain
                best_feature = f
                best_threshold = _midpoint(current, following)
    return best_feature, best_threshold, best_gain


@njit(cache=True)
def _apply(feature, threshold, left, right, X):
    leaves = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        leaves[i] = node
    return leaves


def split_gain(g_left: float, h_left: float, g_right: float, h_right: float, lambda_l2: float, gamma_split: float = 0.0) -> float:
    """½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − (G_L+G_R)²/(H_L+H_R+λ)] − γ"""
    g = g_left + g_right
    h = h_left + h_right
    return 0.5 * (
        g_left ** 2 / (h_left + lambda_l2)
        + g_right ** 2 / (h_right + lambda_l2)
        - g ** 2 / (h + lambda_l2)
    ) - gamma_split


# =============================================================================
# TREE STRUCTURE
# =============================================================================

@dataclass(frozen=True)
class TreeParams:
    """Induction limits shared by both tree kinds."""

    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    features_per_split: Optional[int] = None
    min_child_weight: float = 1.0
    lambda_l2: float = 1.0
    gamma_split: float = 0.0
    leaf_scale: float = 1.0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError(f"features_per_split must be >= 1, got {self.features_per_split}")
        if self.min_child_weight < 0 or self.lambda_l2 < 0 or self.gamma_split < 0:
            raise ValueError("min_child_weight, lambda_l2 and gamma_split must be >= 0")


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """
    Binary tree stored as parallel node arrays.

    feature[i] is -1 for leaves. value[i] is the class distribution
    (classification) or the scaled leaf score (regression, one column).
    gain[i] is the split improvement credited to feature[i].
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray
    kind: str
    max_depth: Optional[int]
    min_samples_leaf: int

    def __post_init__(self):
        if self.kind not in TREE_KINDS:
            raise ValueError(f"Unknown tree kind '{self.kind}'")
        for name, dtype in (("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
                            ("right", np.int64), ("value", np.float64), ("n_samples", np.int64),
                            ("gain", np.float64)):
            array = np.array(getattr(self, name), dtype=dtype, copy=True)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if self.value.ndim != 2 or self.value.shape[0] != self.feature.shape[0]:
            raise ValueError("value must be an n_nodes × width matrix")

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.is_leaf))

    @property
    def node_depths(self) -> np.ndarray:
        # Children always carry larger ids than their parent
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return depths

    @property
    def depth(self) -> int:
        return int(self.node_depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by every row of X."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"Expected a 2-D feature matrix, got shape {X.shape}")
        return _apply(self.feature, self.threshold, self.left, self.right, X)

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Leaf argmax class per row (classification trees)."""
        if self.kind != "classification":
            raise ValueError("predict is defined for classification trees only")
        return np.argmax(self.predict_value(X), axis=1)

    def importances(self, p: int) -> np.ndarray:
        """Total split gain per feature."""
        internal = ~self.is_leaf
        return np.bincount(self.feature[internal], weights=self.gain[internal], minlength=p)

    def equals(self, other: "DecisionTree") -> bool:
        return (
            self.kind == other.kind
            and self.n_nodes == other.n_nodes
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("feature", "threshold", "left", "right", "value", "n_samples", "gain")
            )
        )

    def to_lines(self) -> List[str]:
        """One node per line: id kind n_samples feature threshold left right gain values."""
        lines = [
            f"tree kind={self.kind} n_nodes={self.n_nodes} width={self.value.shape[1]} "
            f"max_depth={'none' if self.max_depth is None else self.max_depth} "
            f"min_samples_leaf={self.min_samples_leaf}"
        ]
        for i in range(self.n_nodes):
            node_kind = "leaf" if self.feature[i] < 0 else "split"
            values = ",".join(repr(float(v)) for v in self.value[i])
            lines.append(
                f"{i} {node_kind} {self.n_samples[i]} {self.feature[i]} {float(self.threshold[i])!r} "
                f"{self.left[i]} {self.right[i]} {float(self.gain[i])!r} {values}"
            )
        return lines

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "DecisionTree":
        header = dict(item.split("=", 1) for item in lines[0].split()[1:])
        n_nodes = int(header["n_nodes"])
        body = lines[1:1 + n_nodes]
        if len(body) != n_nodes:
            raise ValueError(f"Tree declares {n_nodes} nodes, found {len(body)}")

        fields = [line.split() for line in body]
        for i, parts in enumerate(fields):
            if len(parts) != 9 or int(parts[0]) != i:
                raise ValueError(f"Malformed tree node line {i}: {body[i]!r}")
        return cls(
            feature=[int(f[3]) for f in fields],
            threshold=[float(f[4]) for f in fields],
            left=[int(f[5]) for f in fields],
            right=[int(f[6]) for f in fields],
            value=[[float(v) for v in f[8].split(",")] for f in fields],
            n_samples=[int(f[2]) for f in fields],
            gain=[float(f[7]) for f in fields],
            kind=header["kind"],
            max_depth=None if header["max_depth"] == "none" else int(header["max_depth"]),
            min_samples_leaf=int(header["min_samples_leaf"]),
        )


# =============================================================================
# INDUCTION
# =============================================================================

def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def fit_tree(
    data: Union[Dataset, np.ndarray],
    labels: Optional[Sequence[int]] = None,
    grad_hess: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    params: TreeParams = TreeParams(),
    column_mask: Optional[Sequence[int]] = None,
    seed=None,
    rows: Optional[np.ndarray] = None,
) -> DecisionTree:
    """
    Grow one tree greedily.

    Args:
        data: Dataset, or an n×p feature matrix
        labels: Class labels when data is a matrix (classification trees)
        grad_hess: Per-row (gradient, hessian) arrays; grows a regression tree
        params: Induction limits
        column_mask: Feature indices the tree may split on (default all)
        seed: Seed or Generator for per-split feature draws
        rows: Training row indices into data, duplicates allowed (default all)

    Returns:
        DecisionTree
    """
    if isinstance(data, Dataset):
        X = data.rows
        labels = data.labels if labels is None else labels
    else:
        X = np.asarray(data, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    rows = np.arange(n, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.shape[0] < 1:
        raise ValueError("Cannot grow a tree on zero rows")

    columns = np.arange(p, dtype=np.int64) if column_mask is None else np.sort(np.asarray(column_mask, dtype=np.int64))
    if columns.shape[0] < 1:
        raise ValueError("column_mask selects no features")
    per_split = columns.shape[0] if params.features_per_split is None else min(params.features_per_split, columns.shape[0])
    rng = _as_generator(seed) if per_split < columns.shape[0] else None

    regression = grad_hess is not None
    if regression:
        grad = np.ascontiguousarray(grad_hess[0], dtype=np.float64)
        hess = np.ascontiguousarray(grad_hess[1], dtype=np.float64)
    else:
        if labels is None:
            raise ValueError("Classification trees need labels")
        y = np.ascontiguousarray(labels, dtype=np.int64)

    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[np.ndarray] = []
    n_samples: List[int] = []
    gain: List[float] = []

    def allocate() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        n_samples.append(0)
        gain.append(0.0)
        return len(feature) - 1

    stack = [(allocate(), rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        n_node = node_rows.shape[0]
        n_samples[node] = n_node

        if regression:
            g_sum = float(np.sum(grad[node_rows]))
            h_sum = float(np.sum(hess[node_rows]))
            value[node] = np.array([-g_sum / (h_sum + params.lambda_l2) * params.leaf_scale])
            splittable = True
        else:
            counts = np.bincount(y[node_rows], minlength=N_CLASSES).astype(np.float64)
            value[node] = counts / n_node
            splittable = np.count_nonzero(counts) > 1

        if params.max_depth is not None and depth >= params.max_depth:
            splittable = False
        if n_node < 2 * params.min_samples_leaf:
            splittable = False
        if not splittable:
            continue

        candidates = columns
        if rng is not None:
            candidates = np.sort(rng.choice(columns, size=per_split, replace=False))

        if regression:
            best_feature, best_threshold, best_gain = _second_order_split_search(
                X, grad, hess, node_rows, candidates, params.min_samples_leaf,
                params.min_child_weight, params.lambda_l2, params.gamma_split,
            )
        else:
            best_feature, best_threshold, best_gain = _gini_split_search(
                X, y, node_rows, candidates, N_CLASSES, params.min_samples_leaf,
            )
        if best_feature < 0:
            continue

        goes_left = X[node_rows, best_feature] <= best_threshold
        left_id = allocate()
        right_id = allocate()
        feature[node] = int(best_feature)
        threshold[node] = float(best_threshold)
        left[node] = left_id
        right[node] = right_id
        gain[node] = max(float(best_gain), 0.0)
        stack.append((right_id, node_rows[~goes_left], depth + 1))
        stack.append((left_id, node_rows[goes_left], depth + 1))

    return DecisionTree(
        feature=feature,
        threshold=threshold,
        left=left,
        right=right,
        value=np.vstack(value),
        n_samples=n_samples,
        gain=gain,
        kind="regression" if regression else "classification",
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
    )
