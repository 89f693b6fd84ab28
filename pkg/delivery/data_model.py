"""
Household dataset schema, loading, transforms, train/test splits and
synthetic household generation.

A Dataset is an immutable feature matrix plus ordinal weekly-delivery labels
(0..5, where 5 means "5 or more"). CSV files carry one header row with the
feature columns and a `deliveries` label column.

Usage:
    from delivery.data_model import load_dataset, split_train_test

    data = load_dataset('data/households.csv')
    train, test = split_train_test(data, 0.7, seed=42)
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from delivery.config import (
    COLUMN_CATEGORIES,
    COLUMN_KINDS,
    LABEL_COLUMN,
    N_CLASSES,
    STRUCTURAL_ZERO_COLUMN,
    SYNTHETIC_SPEC,
    VARIABLE_CATALOGUE,
)

logger = logging.getLogger(__name__)

TRANSFORMS = ("log1p", "identity")
DISTRIBUTIONS = ("normal", "bernoulli", "uniform", "structural_zero")


class DatasetError(ValueError):
    """Invalid dataset content, located by 1-based data row and column name."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


# =============================================================================
# SCHEMA
# =============================================================================

@dataclass(frozen=True)
class ColumnSpec:
    """One feature column: name, value kind and variable category."""

    name: str
    kind: str = "continuous"
    category: str = "socioeconomic"

    def __post_init__(self):
        if not self.name or not self.name.isidentifier():
            raise ValueError(f"Column name must be a nonempty identifier, got {self.name!r}")
        if self.kind not in COLUMN_KINDS:
            raise ValueError(f"Column '{self.name}': unknown kind '{self.kind}'")
        if self.category not in COLUMN_CATEGORIES:
            raise ValueError(f"Column '{self.name}': unknown category '{self.category}'")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature columns plus the set of log-transformed column names."""

    columns: Tuple[ColumnSpec, ...]
    log_transformed: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "log_transformed", frozenset(self.log_transformed))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"Duplicate column names in schema: {duplicates}")
        if LABEL_COLUMN in names:
            raise ValueError(f"'{LABEL_COLUMN}' is reserved for the label column")
        unknown = self.log_transformed - set(names)
        if unknown:
            raise ValueError(f"log_transformed names unknown columns: {sorted(unknown)}")

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "FeatureSchema":
        """Build a schema for the given names using the variable catalogue."""
        columns = []
        for name in names:
            kind, category = VARIABLE_CATALOGUE.get(name, ("continuous", "socioeconomic"))
            columns.append(ColumnSpec(name, kind, category))
        return cls(tuple(columns))

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.columns]

    def index(self, name: str) -> int:
        for i, column in enumerate(self.columns):
            if column.name == name:
                return i
        raise DatasetError("unknown column", column=name)

    def select(self, names: Sequence[str]) -> "FeatureSchema":
        columns = tuple(self.columns[self.index(n)] for n in names)
        return FeatureSchema(columns, self.log_transformed & set(names))


# =============================================================================
# DATASET
# =============================================================================

def _check_values(schema: FeatureSchema, rows: np.ndarray, labels: np.ndarray) -> None:
    """Raise DatasetError at the first value violating the schema contract."""
    bad = ~np.isfinite(rows)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DatasetError("non-finite value", row=int(i) + 1, column=schema.columns[j].name)

    for j, column in enumerate(schema.columns):
        values = rows[:, j]
        if column.kind == "binary":
            bad = (values != 0.0) & (values != 1.0)
            rule = "binary value must be 0 or 1"
        elif column.kind == "percentage":
            bad = (values < 0.0) | (values > 1.0)
            rule = "percentage value must lie in [0, 1]"
        else:
            continue
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DatasetError(f"{rule}, got {values[i]!r}", row=i + 1, column=column.name)

    bad = (labels < 0) | (labels >= N_CLASSES)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DatasetError(f"label outside 0..{N_CLASSES - 1}: {labels[i]}", row=i + 1, column=LABEL_COLUMN)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable n×p feature matrix with ordinal labels 0..5."""

    schema: FeatureSchema
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64, copy=True)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1) if len(self.schema.columns) == 1 else rows.reshape(1, -1)
        labels = np.asarray(self.labels)
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise DatasetError("labels must be integers")
        labels = np.array(labels, dtype=np.int64, copy=True)

        if rows.ndim != 2 or rows.shape[0] < 1:
            raise DatasetError("dataset must have at least one row")
        if rows.shape[1] != len(self.schema.columns):
            raise DatasetError(
                f"row width {rows.shape[1]} does not match schema column count "
                f"{len(self.schema.columns)}"
            )
        if labels.shape != (rows.shape[0],):
            raise DatasetError(f"{labels.shape[0]} labels for {rows.shape[0]} rows")
        _check_values(self.schema, rows, labels)

        rows.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    @property
    def feature_names(self) -> List[str]:
        return self.schema.names

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    def select(self, names: Sequence[str]) -> "Dataset":
        """Dataset restricted to the named feature columns, in the given order."""
        indices = [self.schema.index(n) for n in names]
        return Dataset(self.schema.select(names), self.rows[:, indices], self.labels)

    def take(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.schema, self.rows[indices], self.labels[indices])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=self.feature_names)
        frame[LABEL_COLUMN] = self.labels
        return frame

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of schema, values and labels."""
        return (
            self.schema == other.schema
            and self.rows.shape == other.rows.shape
            and np.array_equal(self.rows.view(np.uint64), other.rows.view(np.uint64))
            and np.array_equal(self.labels, other.labels)
        )


def _parse_column(values: np.ndarray, name: str) -> np.ndarray:
    """Parse a column of CSV strings to float64, naming the first bad cell."""
    try:
        return values.astype(np.float64)
    except (TypeError, ValueError):
        for i, cell in enumerate(values):
            try:
                float(cell)
            except (TypeError, ValueError):
                raise DatasetError(f"cannot parse {cell!r} as a number", row=i + 1, column=name)
        raise


def load_dataset(path: Union[str, Path], schema: Optional[FeatureSchema] = None) -> Dataset:
    """
    Load a household CSV file.

    Args:
        path: UTF-8 CSV with a header row and a `deliveries` label column
        schema: Expected feature columns; inferred from the header and the
                variable catalogue when omitted

    Returns:
        Dataset with rows in file order

    Raises:
        FileNotFoundError: If the file does not exist
        DatasetError: Missing/unexpected column, unparseable cell, non-finite
                      value or label outside 0..5 (with row/column location)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    header = list(frame.columns)

    if LABEL_COLUMN not in header:
        raise DatasetError("missing label column", column=LABEL_COLUMN)
    feature_columns = [c for c in header if c != LABEL_COLUMN]

    if schema is None:
        schema = FeatureSchema.from_names(feature_columns)
    else:
        for name in schema.names:
            if name not in header:
                raise DatasetError("missing column", column=name)
        for name in feature_columns:
            if name not in schema.names:
                raise DatasetError("column not in schema", column=name)

    if len(frame) == 0:
        raise DatasetError(f"no data rows in {path}")

    rows = np.empty((len(frame), len(schema.columns)), dtype=np.float64)
    for j, name in enumerate(schema.names):
        rows[:, j] = _parse_column(frame[name].to_numpy(), name)

    raw_labels = _parse_column(frame[LABEL_COLUMN].to_numpy(), LABEL_COLUMN)
    for i, value in enumerate(raw_labels):
        if not np.isfinite(value) or value != math.floor(value):
            raise DatasetError(f"label must be an integer, got {value!r}", row=i + 1, column=LABEL_COLUMN)
        if not 0 <= value < N_CLASSES:
            raise DatasetError(f"label outside 0..{N_CLASSES - 1}: {int(value)}", row=i + 1, column=LABEL_COLUMN)

    dataset = Dataset(schema, rows, raw_labels.astype(np.int64))
    logger.info(f"Loaded {dataset.n} rows × {dataset.p} features from {path}")
    return dataset


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write a Dataset as CSV with shortest round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    frame = pd.DataFrame(
        {name: [repr(float(v)) for v in dataset.rows[:, j]] for j, name in enumerate(dataset.feature_names)}
    )
    frame[LABEL_COLUMN] = [str(int(v)) for v in dataset.labels]
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


# =============================================================================
# TRANSFORMS AND SPLITS
# =============================================================================

def transform_features(dataset: Dataset, transforms: Iterable[Tuple[str, str]]) -> Dataset:
    """
    Apply per-column transforms (log1p or identity).

    log1p columns become continuous and are added to schema.log_transformed.
    """
    rows = np.array(dataset.rows, copy=True)
    columns = list(dataset.schema.columns)
    logged = set(dataset.schema.log_transformed)

    for name, transform in transforms:
        if transform not in TRANSFORMS:
            raise ValueError(f"Unknown transform '{transform}' for column '{name}'")
        j = dataset.schema.index(name)
        if transform == "identity":
            continue
        negative = np.flatnonzero(rows[:, j] < 0)
        if negative.size:
            i = int(negative[0])
            raise DatasetError(f"log1p of negative value {rows[i, j]!r}", row=i + 1, column=name)
        rows[:, j] = np.log1p(rows[:, j])
        columns[j] = ColumnSpec(name, "continuous", columns[j].category)
        logged.add(name)

    return Dataset(FeatureSchema(tuple(columns), frozenset(logged)), rows, dataset.labels)


def split_indices(n: int, train_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted train/test row indices; train size is round-half-up of n·fraction."""
    if n < 2:
        raise ValueError(f"Need at least 2 rows to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")

    n_train = math.floor(n * train_fraction + 0.5)
    n_train = min(max(n_train, 1), n - 1)
    permutation = np.random.default_rng(seed).permutation(n)
    return np.sort(permutation[:n_train]), np.sort(permutation[n_train:])


def split_train_test(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Random train/test partition, deterministic per seed."""
    train_idx, test_idx = split_indices(dataset.n, train_fraction, seed)
    return dataset.take(train_idx), dataset.take(test_idx)


# =============================================================================
# SYNTHETIC HOUSEHOLDS
# =============================================================================

@dataclass(frozen=True)
class FeatureRule:
    """Sampling rule and true coefficient for one synthetic feature column."""

    name: str
    distribution: str
    params: Mapping[str, float] = field(default_factory=dict)
    beta: float = 0.0
    kind: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"Feature '{self.name}': unknown distribution '{self.distribution}'")
        required = {
            "normal": ("mean", "sd"),
            "bernoulli": ("p",),
            "uniform": ("low", "high"),
            "structural_zero": (),
        }[self.distribution]
        missing = [k for k in required if k not in self.params]
        if missing:
            raise ValueError(f"Feature '{self.name}': missing {self.distribution} parameters {missing}")
        params = {k: float(v) for k, v in self.params.items()}
        if self.distribution == "normal" and params["sd"] <= 0:
            raise ValueError(f"Feature '{self.name}': sd must be positive")
        if self.distribution == "bernoulli" and not 0.0 <= params["p"] <= 1.0:
            raise ValueError(f"Feature '{self.name}': p must lie in [0, 1]")
        if self.distribution == "uniform" and not params["low"] < params["high"]:
            raise ValueError(f"Feature '{self.name}': uniform needs low < high")
        if not math.isfinite(float(self.beta)):
            raise ValueError(f"Feature '{self.name}': beta must be finite")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "beta", float(self.beta))

    def column_spec(self) -> ColumnSpec:
        catalogue_kind, catalogue_category = VARIABLE_CATALOGUE.get(self.name, (None, "socioeconomic"))
        kind = self.kind or catalogue_kind
        if kind is None:
            kind = "binary" if self.distribution in ("bernoulli", "structural_zero") else "continuous"
        return ColumnSpec(self.name, kind, self.category or catalogue_category)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.distribution == "normal":
            return rng.normal(self.params["mean"], self.params["sd"], n)
        if self.distribution == "bernoulli":
            return (rng.random(n) < self.params["p"]).astype(np.float64)
        if self.distribution == "uniform":
            return rng.uniform(self.params["low"], self.params["high"], n)
        # Filled from the structural-zero flags
        return np.zeros(n)


@dataclass(frozen=True)
class SyntheticSpec:
    """Known ordered-probit data-generating process for synthetic households."""

    features: Tuple[FeatureRule, ...]
    thresholds: Tuple[float, ...]
    structural_zero_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        thresholds = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", thresholds)

        if not self.features:
            raise ValueError("Synthetic spec needs at least one feature")
        if len(thresholds) != N_CLASSES - 1:
            raise ValueError(f"Need {N_CLASSES - 1} thresholds, got {len(thresholds)}")
        if not all(math.isfinite(t) for t in thresholds):
            raise ValueError("Thresholds must be finite")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"Thresholds must be strictly increasing: {thresholds}")
        if not 0.0 <= self.structural_zero_rate <= 1.0:
            raise ValueError(f"structural_zero_rate must lie in [0, 1], got {self.structural_zero_rate}")
        zero_columns = [r.name for r in self.features if r.distribution == "structural_zero"]
        if len(zero_columns) > 1:
            raise ValueError(f"At most one structural-zero column allowed, got {zero_columns}")
        # Builds and validates the schema
        self.schema

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema(tuple(rule.column_spec() for rule in self.features))

    @property
    def beta_true(self) -> np.ndarray:
        return np.array([rule.beta for rule in self.features])

    @property
    def thresholds_true(self) -> np.ndarray:
        return np.array(self.thresholds)

    @property
    def structural_zero_column(self) -> Optional[str]:
        for rule in self.features:
            if rule.distribution == "structural_zero":
                return rule.name
        return None


def synthetic_spec_from_dict(config: Mapping) -> SyntheticSpec:
    """
    Build a SyntheticSpec from a parsed config mapping.

    Expected layout (one section per feature column):
        structural_zero_rate: 0.045
        thresholds: [-2.58, -1.95, -1.44, -1.03, -0.66]
        features:
          HH_tenure_rent: {distribution: bernoulli, p: 0.35, beta: 0.26}
    """
    if "features" not in config or not isinstance(config["features"], Mapping):
        raise ValueError("Synthetic spec needs a 'features' section")
    if "thresholds" not in config:
        raise ValueError("Synthetic spec needs 'thresholds'")

    rules = []
    for name, section in config["features"].items():
        section = dict(section or {})
        if "distribution" not in section:
            raise ValueError(f"Feature '{name}': missing 'distribution'")
        distribution = section.pop("distribution")
        beta = section.pop("beta", 0.0)
        kind = section.pop("kind", None)
        category = section.pop("category", None)
        rules.append(FeatureRule(str(name), distribution, section, beta, kind, category))

    return SyntheticSpec(
        features=tuple(rules),
        thresholds=tuple(config["thresholds"]),
        structural_zero_rate=float(config.get("structural_zero_rate", 0.0)),
    )


def load_synthetic_spec(path: Union[str, Path]) -> SyntheticSpec:
    """Load a SyntheticSpec from a YAML file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Synthetic spec not found: {path}")
    with open(path, encoding="utf-8") as f:
        config = yaml.safe_load(f)
    if not isinstance(config, Mapping):
        raise ValueError(f"Synthetic spec {path} must be a YAML mapping")
    return synthetic_spec_from_dict(config)


def default_synthetic_spec() -> SyntheticSpec:
    return synthetic_spec_from_dict(SYNTHETIC_SPEC)


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int) -> Dataset:
    """
    Draw n households from the spec's ordered-probit process.

    Features, latent noise and structural-zero flags use separate random
    streams, so changing structural_zero_rate leaves the non-zero part fixed.
    Flagged households get label 0 and a 1 in the structural-zero column;
    the rest get bin(β'x + ε, thresholds) with ε standard normal.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")

    feature_seq, noise_seq, zero_seq = np.random.SeedSequence(seed).spawn(3)
    feature_rng = np.random.default_rng(feature_seq)

    rows = np.column_stack([rule.sample(feature_rng, n) for rule in spec.features])
    latent = rows @ spec.beta_true + np.random.default_rng(noise_seq).standard_normal(n)
    labels = np.searchsorted(spec.thresholds_true, latent, side="left")

    flags = np.random.default_rng(zero_seq).random(n) < spec.structural_zero_rate
    labels[flags] = 0
    zero_column = spec.structural_zero_column
    if zero_column is not None:
        rows[:, [r.name for r in spec.features].index(zero_column)] = flags.astype(np.float64)

    return Dataset(spec.schema, rows, labels)


# =============================================================================
# SUMMARIES
# =============================================================================

@dataclass(frozen=True)
class DeliverySummary:
    n: int
    counts: Tuple[int, ...]
    shares: Tuple[float, ...]
    mean_deliveries: float
    structural_zeros: Optional[int] = None
    group_column: Optional[str] = None
    group_means: Dict[float, float] = field(default_factory=dict)


def delivery_summary(dataset: Dataset, by: Optional[str] = None) -> DeliverySummary:
    """
    Class counts/shares, mean weekly deliveries (class 5 counted as 5), the
    structural-zero count when that column exists, and optional mean
    deliveries per level of a grouping column.
    """
    counts = np.bincount(dataset.labels, minlength=N_CLASSES)
    structural_zeros = None
    if STRUCTURAL_ZERO_COLUMN in dataset.feature_names:
        structural_zeros = int(np.sum(dataset.column(STRUCTURAL_ZERO_COLUMN) == 1.0))

    group_means = {}
    if by is not None:
        values = dataset.column(by)
        for level in np.unique(values):
            group_means[float(level)] = float(np.mean(dataset.labels[values == level]))

    return DeliverySummary(
        n=dataset.n,
        counts=tuple(int(c) for c in counts),
        shares=tuple(float(c) / dataset.n for c in counts),
        mean_deliveries=float(np.mean(dataset.labels)),
        structural_zeros=structural_zeros,
        group_column=by,
        group_means=group_means,
    )
