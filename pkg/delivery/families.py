"""
Model families behind one fit/predict interface, and model files.

Each family maps a name to its fit, probability and importance functions plus
its default hyper-parameters. Fitted models are wrapped with the feature names
they were trained on so evaluation and explanation can check schemas.

Model files are plain text: a header block of key=value lines, a `---`
separator, then the family body (probit key=value records, or one tree node
per line for the ensembles).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from delivery import ensembles, ordered_probit
from delivery.config import FOREST_DEFAULTS, GBM_DEFAULTS, PROBIT_DEFAULTS
from delivery.data_model import Dataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelFamily:
    """
    name: registry key used on the command line
    fit: (data, hyperparams, seed, n_jobs) -> estimator
    predict_proba: (estimator, X) -> n×6 probabilities
    importances: estimator -> per-feature importance used by RFE
    defaults: untuned hyper-parameters
    expected_shares: whether mean probabilities are meaningful aggregate shares
    """

    name: str
    fit: Callable[[Dataset, Mapping, int, int], Any]
    predict_proba: Callable[[Any, np.ndarray], np.ndarray]
    importances: Callable[[Any], np.ndarray]
    defaults: Mapping[str, Any]
    expected_shares: bool


def _fit_probit(data: Dataset, hyperparams: Mapping, seed: int, n_jobs: int):
    settings = {**PROBIT_DEFAULTS, **dict(hyperparams)}
    unknown = sorted(set(settings) - set(PROBIT_DEFAULTS))
    if unknown:
        raise ValueError(f"Unknown probit settings: {', '.join(unknown)}")
    return ordered_probit.fit(data, max_iter=int(settings["max_iter"]), tolerance=float(settings["tolerance"]), seed=seed)


def _probit_importances(fit: ordered_probit.OrderedProbitFit) -> np.ndarray:
    """|t| per coefficient, or |β| when the covariance is unavailable."""
    t_values = fit.t_values
    p = fit.params.p
    if t_values is None or not np.all(np.isfinite(t_values[:p])):
        return np.abs(fit.params.beta)
    return np.abs(t_values[:p])


def _fit_forest(data: Dataset, hyperparams: Mapping, seed: int, n_jobs: int):
    return ensembles.fit_random_forest(data, {**FOREST_DEFAULTS, **dict(hyperparams)}, seed=seed, n_jobs=n_jobs)


def _fit_gbm(data: Dataset, hyperparams: Mapping, seed: int, n_jobs: int):
    return ensembles.fit_gbm(data, {**GBM_DEFAULTS, **dict(hyperparams)}, seed=seed, n_jobs=n_jobs)


FAMILIES: Dict[str, ModelFamily] = {
    "probit": ModelFamily(
        name="probit",
        fit=_fit_probit,
        predict_proba=ordered_probit.class_probability_matrix,
        importances=_probit_importances,
        defaults=PROBIT_DEFAULTS,
        expected_shares=True,
    ),
    "forest": ModelFamily(
        name="forest",
        fit=_fit_forest,
        predict_proba=ensembles.forest_predict_proba,
        importances=lambda model: model.importances(),
        defaults=FOREST_DEFAULTS,
        expected_shares=False,
    ),
    "gbm": ModelFamily(
        name="gbm",
        fit=_fit_gbm,
        predict_proba=ensembles.gbm_predict_proba,
        importances=lambda model: model.importances(),
        defaults=GBM_DEFAULTS,
        expected_shares=True,
    ),
}


def get_family(name: str) -> ModelFamily:
    if name not in FAMILIES:
        raise ValueError(f"Unknown model family '{name}' (expected one of: {', '.join(FAMILIES)})")
    return FAMILIES[name]


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A trained estimator plus the schema and settings it was trained with."""

    family: str
    estimator: Any
    feature_names: Tuple[str, ...]
    hyperparams: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    @property
    def spec(self) -> ModelFamily:
        return get_family(self.family)

    @property
    def converged(self) -> bool:
        return getattr(self.estimator, "converged", True)

    def matrix(self, data: Union[Dataset, np.ndarray]) -> np.ndarray:
        """Feature matrix in training column order; datasets are checked by name."""
        if isinstance(data, Dataset):
            missing = [name for name in self.feature_names if name not in data.feature_names]
            if missing:
                raise ValueError(f"Schema mismatch: dataset lacks model features {', '.join(missing)}")
            return data.select(list(self.feature_names)).rows
        X = np.asarray(data, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != len(self.feature_names):
            raise ValueError(f"Dimension mismatch: model expects {len(self.feature_names)} features, got {X.shape[1]}")
        return X

    def predict_proba(self, data: Union[Dataset, np.ndarray]) -> np.ndarray:
        return self.spec.predict_proba(self.estimator, self.matrix(data))

    def predict(self, data: Union[Dataset, np.ndarray]) -> np.ndarray:
        """Argmax class; forest ties resolve on votes, which share the argmax."""
        return np.argmax(self.predict_proba(data), axis=1)

    def importances(self) -> np.ndarray:
        return self.spec.importances(self.estimator)


def fit_model(
    family: str,
    data: Dataset,
    hyperparams: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
    n_jobs: int = 1,
    feature_names: Optional[Sequence[str]] = None,
) -> FittedModel:
    """Fit a family on the given (or all) feature columns."""
    spec = get_family(family)
    if feature_names is not None:
        data = data.select(list(feature_names))
    hyperparams = dict(hyperparams or {})
    estimator = spec.fit(data, hyperparams, seed, n_jobs)
    return FittedModel(
        family=family,
        estimator=estimator,
        feature_names=tuple(data.feature_names),
        hyperparams=hyperparams,
        seed=seed,
    )


# =============================================================================
# MODEL FILES
# =============================================================================

SEPARATOR = "---"


def model_to_text(model: FittedModel) -> str:
    lines = [
        f"model={model.family}",
        f"features={','.join(model.feature_names)}",
        f"seed={model.seed}",
    ]
    for key in sorted(model.hyperparams):
        lines.append(f"hyperparam.{key}={model.hyperparams[key]!r}")
    lines.append(SEPARATOR)

    if model.family == "probit":
        lines.extend(f"{key}={value}" for key, value in ordered_probit.fit_to_records(model.estimator))
    elif model.family == "forest":
        lines.extend(ensembles.forest_to_lines(model.estimator))
    else:
        lines.extend(ensembles.gbm_to_lines(model.estimator))
    return "\n".join(lines) + "\n"


def _parse_literal(raw: str):
    if raw == "None":
        return None
    if raw in ("True", "False"):
        return raw == "True"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw.strip("'\"")


def model_from_text(text: str) -> FittedModel:
    lines = text.splitlines()
    if SEPARATOR not in lines:
        raise ValueError("Model file has no header separator")
    split = lines.index(SEPARATOR)
    header = dict(line.split("=", 1) for line in lines[:split] if line and not line.startswith("#"))
    body = [line for line in lines[split + 1:] if line]

    family = header.get("model")
    get_family(family)
    hyperparams = {
        key[len("hyperparam."):]: _parse_literal(value)
        for key, value in header.items()
        if key.startswith("hyperparam.")
    }

    if family == "probit":
        estimator = ordered_probit.fit_from_records(dict(line.split("=", 1) for line in body))
    elif family == "forest":
        estimator = ensembles.forest_from_lines(body)
    else:
        estimator = ensembles.gbm_from_lines(body)

    return FittedModel(
        family=family,
        estimator=estimator,
        feature_names=tuple(n for n in header.get("features", "").split(",") if n),
        hyperparams=hyperparams,
        seed=int(header.get("seed", 0)),
    )


def save_model(model: FittedModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_text(model))
    logger.info(f"Saved {model.family} model to {path}")
    return path


def load_model(path: Union[str, Path]) -> FittedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    return model_from_text(path.read_text())
