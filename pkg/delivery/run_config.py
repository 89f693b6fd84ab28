"""
Run configuration, seed derivation and run manifests for the CLI.

Settings resolve as: command defaults < YAML config file (--config) < flags.
Flags left at None do not override.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import yaml

from delivery.config import (
    CV_FOLDS,
    DEFAULT_OUTPUT_DIR,
    OUTPUT_DIR_ENV,
    SHAP_BACKGROUND_SIZE,
    SHAP_PERMUTATIONS,
    TRAIN_FRACTION,
)

logger = logging.getLogger(__name__)

COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "generate": {"spec": None, "n": 1000, "seed": 0, "out": None},
    "split": {"data": None, "fraction": TRAIN_FRACTION, "seed": 0},
    "fit": {"model": None, "train": None, "features": None, "params": None, "seed": 0, "out": None, "n_jobs": 1},
    "select": {"model": None, "train": None, "params": None, "k": CV_FOLDS, "target_count": None, "seed": 0, "n_jobs": 1},
    "tune": {"model": None, "train": None, "domain": None, "n_draws": 20, "k": CV_FOLDS, "seed": 0, "n_jobs": 1},
    "evaluate": {"models": None, "test": None, "seed": 0},
    "explain": {
        "model": None,
        "data": None,
        "background": None,
        "method": "exact",
        "n_permutations": SHAP_PERMUTATIONS,
        "background_size": SHAP_BACKGROUND_SIZE,
        "n_rows": None,
        "features": None,
        "seed": 0,
        "n_jobs": 1,
    },
    "replay": {"manifest": None},
}

REQUIRED = {
    "split": ("data",),
    "fit": ("model", "train"),
    "select": ("model", "train"),
    "tune": ("model", "train"),
    "evaluate": ("models", "test"),
    "explain": ("model", "data"),
    "replay": ("manifest",),
}

MODEL_FAMILIES = ("probit", "forest", "gbm")
EXPLAIN_METHODS = ("exact", "sampled")


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Flat YAML mapping of setting name to value."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path}")
    with open(path) as f:
        content = yaml.safe_load(f)
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ValueError(f"Configuration file {path} must hold a key: value mapping")
    nested = [key for key, value in content.items() if isinstance(value, dict)]
    if nested:
        raise ValueError(f"Configuration file {path} must be flat; nested keys: {', '.join(map(str, nested))}")
    return {str(key).replace("-", "_"): value for key, value in content.items()}


def file_digest(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def derive_seed(seed: int, tag: str) -> int:
    """
    Component seed from the run seed and a component tag.

    The tag's SHA-256 prefix and the seed form the entropy of a numpy
    SeedSequence; its first 32-bit state word is the component seed.
    """
    tag_word = int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:4], "big")
    return int(np.random.SeedSequence([int(seed), tag_word]).generate_state(1)[0])


@dataclass
class RunConfig:
    command: str
    settings: Dict[str, Any]
    config_path: Optional[str] = None
    config_sha256: Optional[str] = None
    output_dir: Path = field(default_factory=default_output_dir)

    def __getitem__(self, key: str) -> Any:
        return self.settings[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.settings.get(key, default)

    def validate(self) -> None:
        """Check every setting before any work starts."""
        s = self.settings
        for key in REQUIRED.get(self.command, ()):
            if s.get(key) in (None, ""):
                raise ValueError(f"'{self.command}' needs --{key.replace('_', '-')}")

        def integer(key, low, allow_none=False):
            value = s.get(key)
            if value is None and allow_none:
                return
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < low:
                raise ValueError(f"{key} must be an integer >= {low}, got {value!r}")

        if "seed" in s:
            integer("seed", 0)
        if self.command == "generate":
            integer("n", 1)
        if "fraction" in s:
            fraction = s["fraction"]
            if not isinstance(fraction, (int, float)) or not 0.0 < fraction < 1.0:
                raise ValueError(f"fraction must be in (0, 1), got {fraction!r}")
        if "k" in s:
            integer("k", 2)
        if "n_draws" in s:
            integer("n_draws", 1)
        if "target_count" in s:
            integer("target_count", 1, allow_none=True)
        if "n_permutations" in s:
            integer("n_permutations", 1)
        if "background_size" in s:
            integer("background_size", 1)
        if "n_rows" in s:
            integer("n_rows", 1, allow_none=True)
        if "n_jobs" in s:
            n_jobs = s["n_jobs"]
            if isinstance(n_jobs, bool) or not isinstance(n_jobs, int) or n_jobs == 0:
                raise ValueError(f"n_jobs must be a non-zero integer, got {n_jobs!r}")
        if "model" in s and self.command in ("fit", "select", "tune") and s["model"] not in MODEL_FAMILIES:
            raise ValueError(f"model must be one of {', '.join(MODEL_FAMILIES)}, got {s['model']!r}")
        if self.command == "explain" and s["method"] not in EXPLAIN_METHODS:
            raise ValueError(f"method must be exact or sampled, got {s['method']!r}")


def build_run_config(
    command: str,
    flags: Mapping[str, Any],
    config_path: Optional[Union[str, Path]] = None,
    output_dir: Optional[Union[str, Path]] = None,
) -> RunConfig:
    if command not in COMMAND_DEFAULTS:
        raise ValueError(f"Unknown command '{command}'")
    settings = dict(COMMAND_DEFAULTS[command])
    config_sha256 = None

    if config_path is not None:
        from_file = load_config_file(config_path)
        unknown = sorted(set(from_file) - set(settings))
        if unknown:
            raise ValueError(f"Unknown settings for '{command}' in {config_path}: {', '.join(unknown)}")
        settings.update(from_file)
        config_sha256 = file_digest(config_path)

    for key, value in flags.items():
        if key in settings and value is not None:
            settings[key] = value

    return RunConfig(
        command=command,
        settings=settings,
        config_path=None if config_path is None else str(config_path),
        config_sha256=config_sha256,
        output_dir=Path(output_dir) if output_dir is not None else default_output_dir(),
    )


# =============================================================================
# MANIFESTS
# =============================================================================

def write_manifest(
    path: Union[str, Path],
    config: RunConfig,
    inputs: Mapping[str, Union[str, Path]],
    outputs: Mapping[str, Union[str, Path]],
) -> Path:
    """
    JSON record of a run: command, resolved settings, config hash, seed and
    SHA-256 digests of every input and output file. No timestamps, so
    identical runs give identical manifests.
    """
    path = Path(path)
    manifest = {
        "command": config.command,
        "settings": {key: (str(v) if isinstance(v, Path) else v) for key, v in config.settings.items()},
        "config_file": config.config_path,
        "config_sha256": config.config_sha256,
        "output_dir": str(config.output_dir),
        "seed": config.settings.get("seed"),
        "inputs": {name: {"path": str(p), "sha256": file_digest(p)} for name, p in sorted(inputs.items())},
        "outputs": {name: {"path": str(p), "sha256": file_digest(p)} for name, p in sorted(outputs.items())},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("command") not in COMMAND_DEFAULTS or manifest.get("command") == "replay":
        raise ValueError(f"Manifest {path} does not describe a replayable command")
    return manifest
