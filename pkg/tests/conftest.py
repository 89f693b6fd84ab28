"""Shared fixtures for the delivery model tests."""

import numpy as np
import pytest

from delivery.data_model import Dataset, FeatureRule, FeatureSchema, SyntheticSpec


def make_dataset(rows, labels, names=None) -> Dataset:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    names = names or [f"x{j}" for j in range(rows.shape[1])]
    return Dataset(FeatureSchema.from_names(names), rows, labels)


def blob_dataset(n: int = 500, seed: int = 0) -> Dataset:
    """Two classes with centers 4σ apart along both features."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rows = rng.standard_normal((n, 2)) + 4.0 * labels[:, None]
    return make_dataset(rows, labels)


def recovery_spec(beta=(0.8, -0.5, 0.3, 0.6), thresholds=(-1.5, -0.6, 0.6, 1.5, 2.4)) -> SyntheticSpec:
    """Normal features with known coefficients and no structural zeros."""
    rules = tuple(
        FeatureRule(f"x{j}", "normal", {"mean": 0.0, "sd": 1.0}, b)
        for j, b in enumerate(beta)
    )
    return SyntheticSpec(rules, thresholds, 0.0)


@pytest.fixture
def blobs() -> Dataset:
    return blob_dataset()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
