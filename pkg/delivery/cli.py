"""
Command-line front end for the delivery-frequency pipeline.

Usage:
    python main.py generate --n 1000 --seed 7
    python main.py split --data outputs/households.csv --seed 7
    python main.py fit --model probit --train outputs/train.csv
    python main.py evaluate --models outputs/probit_model.txt,outputs/forest_model.txt --test outputs/test.csv
    python main.py explain --model outputs/gbm_model.txt --data outputs/test.csv --method sampled

Exit codes: 0 success, 1 error, 2 outputs written but a fit did not converge.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from delivery import ordered_probit
from delivery.config import CLASSES, FOREST_DOMAIN, GBM_DOMAIN, PROBIT_DOMAIN
from delivery.data_model import (
    DeliverySummary,
    default_synthetic_spec,
    delivery_summary,
    generate_synthetic,
    load_dataset,
    load_synthetic_spec,
    split_train_test,
    write_dataset,
)
from delivery.evaluation import (
    build_report,
    format_pct,
    format_report_text,
    report_names,
    write_heatmap_csv,
    write_report_csv,
    write_report_json,
)
from delivery.explanation import (
    explain_dataset,
    global_importance,
    sample_background,
    write_dependence_csv,
    write_importance_csv,
)
from delivery.families import fit_model, load_model, save_model
from delivery.model_selection import (
    HyperparamDomain,
    SelectionAborted,
    randomized_search,
    rfe,
    write_selection,
    write_trial_log,
)
from delivery.run_config import RunConfig, build_run_config, derive_seed, read_manifest, write_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

DEFAULT_DOMAINS = {"probit": PROBIT_DOMAIN, "forest": FOREST_DOMAIN, "gbm": GBM_DOMAIN}


def header(title: str):
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def _split_list(value) -> Optional[List[str]]:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [item.strip() for item in str(value).split(",") if item.strip()]


def _load_params(path) -> Dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Hyper-parameter file not found: {path}")
    with open(path) as f:
        params = yaml.safe_load(f) or {}
    if not isinstance(params, dict):
        raise ValueError(f"Hyper-parameter file {path} must hold a key: value mapping")
    return params


def print_summary(summary: DeliverySummary):
    print(f"  Households: {summary.n:,}")
    print(f"  Mean weekly deliveries: {summary.mean_deliveries:.2f}")
    for c, (count, share) in enumerate(zip(summary.counts, summary.shares)):
        label = f"{c}+" if c == CLASSES[-1] else str(c)
        print(f"    {label:>3} deliveries: {count:>7,}  ({format_pct(share)})")
    if summary.structural_zeros is not None:
        print(f"  {summary.structural_zeros} out of {summary.n} records were structural zeros")
    for level, mean in summary.group_means.items():
        print(f"  Mean deliveries where {summary.group_column}={level:g}: {mean:.2f}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_generate(config: RunConfig) -> int:
    header("Generating synthetic households")
    spec = load_synthetic_spec(config["spec"]) if config["spec"] else default_synthetic_spec()
    out = Path(config["out"]) if config["out"] else config.output_dir / "households.csv"

    data = generate_synthetic(spec, config["n"], derive_seed(config["seed"], "generate"))
    write_dataset(data, out)
    print(f"  ✓ Wrote {data.n:,} households to {out}")
    print_summary(delivery_summary(data))

    inputs = {"spec": config["spec"]} if config["spec"] else {}
    write_manifest(config.output_dir / "generate_manifest.json", config, inputs, {"data": out})
    return EXIT_OK


def cmd_split(config: RunConfig) -> int:
    header("Splitting train/test")
    data = load_dataset(config["data"])
    train, test = split_train_test(data, config["fraction"], derive_seed(config["seed"], "split"))
    train_path = write_dataset(train, config.output_dir / "train.csv")
    test_path = write_dataset(test, config.output_dir / "test.csv")
    print(f"  ✓ Train: {train.n:,} rows -> {train_path}")
    print(f"  ✓ Test:  {test.n:,} rows -> {test_path}")

    write_manifest(
        config.output_dir / "split_manifest.json", config,
        {"data": config["data"]}, {"train": train_path, "test": test_path},
    )
    return EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    family = config["model"]
    header(f"Fitting {family} model")
    train = load_dataset(config["train"])
    params = _load_params(config["params"])
    model = fit_model(
        family,
        train,
        params,
        seed=derive_seed(config["seed"], f"fit:{family}"),
        n_jobs=config["n_jobs"],
        feature_names=_split_list(config["features"]),
    )
    out = Path(config["out"]) if config["out"] else config.output_dir / f"{family}_model.txt"
    save_model(model, out)
    outputs = {"model": out}
    print(f"  ✓ Model saved to {out}")

    if family == "probit":
        report = ordered_probit.format_fit_report(model.estimator)
        report_path = out.with_name(f"{family}_report.txt")
        report_path.write_text(report)
        outputs["report"] = report_path
        print()
        print(report)
    elif family == "gbm":
        history = model.estimator.loss_history
        print(f"  Training cross-entropy: {history[0]:.4f} -> {history[-1]:.4f} over {len(history) - 1} rounds")
    else:
        print(f"  {len(model.estimator.trees)} trees")

    inputs = {"train": config["train"]}
    if config["params"]:
        inputs["params"] = config["params"]
    write_manifest(config.output_dir / f"fit_{family}_manifest.json", config, inputs, outputs)

    if not model.converged:
        print(f"  ⚠ Model did not converge (converged=false); partial report written")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_select(config: RunConfig) -> int:
    family = config["model"]
    header(f"Recursive feature elimination ({family})")
    train = load_dataset(config["train"])
    steps_path = config.output_dir / f"rfe_{family}_steps.csv"
    ranking_path = config.output_dir / f"rfe_{family}_ranking.csv"
    try:
        result = rfe(
            family,
            _load_params(config["params"]),
            train,
            k=config["k"],
            target_count=config["target_count"],
            seed=derive_seed(config["seed"], f"select:{family}"),
            n_jobs=config["n_jobs"],
        )
    except SelectionAborted as e:
        write_selection(e.partial, steps_path, ranking_path)
        print(f"  ✗ Elimination aborted: {e}")
        print(f"  Partial log written to {steps_path}")
        return EXIT_ERROR

    write_selection(result, steps_path, ranking_path)
    for step in result.cv_score_per_step:
        dropped = f"  (drop {step.eliminated})" if step.eliminated else ""
        print(f"  {step.n_features:>3} features: CV accuracy {format_pct(step.mean_accuracy)}{dropped}")
    print(f"  ✓ Retained {len(result.retained_features)} features: {', '.join(result.retained_features)}")

    inputs = {"train": config["train"]}
    if config["params"]:
        inputs["params"] = config["params"]
    write_manifest(
        config.output_dir / f"select_{family}_manifest.json", config,
        inputs, {"steps": steps_path, "ranking": ranking_path},
    )
    return EXIT_OK


def cmd_tune(config: RunConfig) -> int:
    family = config["model"]
    header(f"Randomized search ({family})")
    train = load_dataset(config["train"])
    if config["domain"]:
        domain = HyperparamDomain.load(config["domain"], p=train.p)
    else:
        domain = HyperparamDomain.from_mapping(DEFAULT_DOMAINS[family], p=train.p)

    result = randomized_search(
        family, domain, config["n_draws"], train,
        k=config["k"], seed=derive_seed(config["seed"], f"tune:{family}"), n_jobs=config["n_jobs"],
    )
    log_path = write_trial_log(result, config.output_dir / f"tune_{family}_trials.csv")
    best_path = config.output_dir / f"tune_{family}_best.yml"
    with open(best_path, "w") as f:
        yaml.safe_dump(result.best_params, f, sort_keys=True)

    print(f"  {len(result.trials)} draws evaluated with {config['k']}-fold CV")
    print(f"  ✓ Best draw {result.best_index}: CV accuracy {format_pct(result.best_score)}")
    for key, value in result.best_params.items():
        print(f"    {key}: {value}")

    inputs = {"train": config["train"]}
    if config["domain"]:
        inputs["domain"] = config["domain"]
    write_manifest(
        config.output_dir / f"tune_{family}_manifest.json", config,
        inputs, {"trials": log_path, "best": best_path},
    )
    return EXIT_OK


def cmd_evaluate(config: RunConfig) -> int:
    header("Evaluating models on held-out data")
    test = load_dataset(config["test"])
    paths = _split_list(config["models"])
    models = [load_model(path) for path in paths]
    named = dict(zip(report_names([model.family for model in models]), models))

    reports = build_report(named, test, dataset_id=Path(config["test"]).name, seed=config["seed"])
    outputs = {
        "report_json": write_report_json(reports, config.output_dir / "evaluation.json"),
        "report_csv": write_report_csv(reports, config.output_dir / "evaluation.csv"),
    }
    for report in reports:
        outputs[f"heatmap_{report.model}"] = write_heatmap_csv(report, config.output_dir / f"heatmap_{report.model}.csv")
        print()
        print(format_report_text(report))
    print(f"\n  ✓ Report written to {outputs['report_json']}")

    inputs = {"test": config["test"]}
    inputs.update({f"model_{i}": path for i, path in enumerate(paths)})
    write_manifest(config.output_dir / "evaluate_manifest.json", config, inputs, outputs)

    if not all(model.converged for model in models):
        print("  ⚠ At least one model did not converge")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_explain(config: RunConfig) -> int:
    model = load_model(config["model"])
    header(f"Explaining {model.family} model ({config['method']})")
    data = load_dataset(config["data"])
    rows = model.matrix(data)
    if config["n_rows"] is not None:
        rows = rows[: config["n_rows"]]

    background_data = load_dataset(config["background"]) if config["background"] else data
    background = sample_background(
        model.matrix(background_data), config["background_size"], derive_seed(config["seed"], "explain:background")
    )
    explanations = explain_dataset(
        model.predict_proba,
        rows,
        background,
        method=config["method"],
        n_permutations=config["n_permutations"],
        seed=derive_seed(config["seed"], "explain:permutations"),
        feature_names=model.feature_names,
        n_jobs=config["n_jobs"],
    )

    ranking = global_importance(explanations)
    outputs = {"importance": write_importance_csv(ranking, config.output_dir / f"importance_{model.family}.csv")}
    features = _split_list(config["features"]) or list(model.feature_names)
    for feature in features:
        if feature not in model.feature_names:
            raise ValueError(f"Unknown dependence feature '{feature}'")
        outputs[f"dependence_{feature}"] = write_dependence_csv(
            explanations, feature, config.output_dir / f"dependence_{model.family}_{feature}.csv"
        )

    if model.family == "probit":
        outputs["marginal_effects"] = _write_marginal_effects(model, data, config.output_dir / "marginal_effects_probit.csv")

    print(f"  {len(explanations)} observations, background of {background.shape[0]} rows (probability scale)")
    for rank, j in enumerate(ranking.order[:10], start=1):
        print(f"    {rank:>2}. {ranking.feature_names[j]:<32} {ranking.total[j]:.4f}")
    print(f"  ✓ Importance written to {outputs['importance']}")

    inputs = {"model": config["model"], "data": config["data"]}
    if config["background"]:
        inputs["background"] = config["background"]
    write_manifest(config.output_dir / f"explain_{model.family}_manifest.json", config, inputs, outputs)
    return EXIT_OK


def _write_marginal_effects(model, data, path: Path) -> Path:
    """Average marginal effects and, for 0/1 columns, discrete-change effects."""
    subset = data.select(list(model.feature_names))
    average = ordered_probit.average_marginal_effects(model.estimator, subset)
    records = []
    for j, name in enumerate(model.feature_names):
        column = subset.rows[:, j]
        binary = bool(np.all((column == 0.0) | (column == 1.0)))
        change = ordered_probit.discrete_change_effects(model.estimator, subset, name) if binary else None
        for c in CLASSES:
            records.append({
                "feature": name,
                "class": c,
                "average_marginal_effect": average[c, j],
                "discrete_change": None if change is None else change[c],
            })
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records).to_csv(path, index=False, lineterminator="\n")
    return path


def cmd_replay(config: RunConfig) -> int:
    manifest = read_manifest(config["manifest"])
    print(f"Replaying '{manifest['command']}' from {config['manifest']}")
    replayed = build_run_config(
        manifest["command"],
        manifest["settings"],
        output_dir=manifest.get("output_dir"),
    )
    replayed.validate()
    return COMMANDS[replayed.command](replayed)


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "generate": cmd_generate,
    "split": cmd_split,
    "fit": cmd_fit,
    "select": cmd_select,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "replay": cmd_replay,
}


# =============================================================================
# ARGUMENT PARSING
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Household home-delivery frequency models: ordered probit, random forest and gradient boosting"
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", help="YAML file of settings (flags override)")
        sub.add_argument("--out-dir", help="Output directory (default: $DELIVERY_OUTPUT_DIR or outputs/)")
        return sub

    sub = add("generate", "Write a synthetic household dataset")
    sub.add_argument("--spec", help="Synthetic spec YAML (default: built-in household process)")
    sub.add_argument("--n", type=int, help="Number of households")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--out", help="Output CSV path")

    sub = add("split", "Split a dataset into train.csv and test.csv")
    sub.add_argument("--data", help="Input CSV")
    sub.add_argument("--fraction", type=float, help="Training fraction (default 0.7)")
    sub.add_argument("--seed", type=int, help="Run seed")

    sub = add("fit", "Fit a model on training data")
    sub.add_argument("--model", choices=["probit", "forest", "gbm"], help="Model family")
    sub.add_argument("--train", help="Training CSV")
    sub.add_argument("--features", help="Comma-separated feature columns (default: all)")
    sub.add_argument("--params", help="Hyper-parameter YAML")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--out", help="Model file path")
    sub.add_argument("--n-jobs", type=int, help="Parallel workers")

    sub = add("select", "Recursive feature elimination")
    sub.add_argument("--model", choices=["probit", "forest", "gbm"], help="Model family")
    sub.add_argument("--train", help="Training CSV")
    sub.add_argument("--params", help="Hyper-parameter YAML")
    sub.add_argument("--k", type=int, help="CV folds (default 10)")
    sub.add_argument("--target-count", type=int, help="Features to keep (default: accuracy tolerance rule)")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--n-jobs", type=int, help="Parallel workers")

    sub = add("tune", "Randomized hyper-parameter search")
    sub.add_argument("--model", choices=["probit", "forest", "gbm"], help="Model family")
    sub.add_argument("--train", help="Training CSV")
    sub.add_argument("--domain", help="Tuning domain YAML (default: built-in domain)")
    sub.add_argument("--n-draws", type=int, help="Number of random draws")
    sub.add_argument("--k", type=int, help="CV folds (default 10)")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--n-jobs", type=int, help="Parallel workers")

    sub = add("evaluate", "Held-out evaluation report")
    sub.add_argument("--models", help="Comma-separated model files")
    sub.add_argument("--test", help="Test CSV")
    sub.add_argument("--seed", type=int, help="Seed recorded in the report")

    sub = add("explain", "Shapley importance and dependence tables")
    sub.add_argument("--model", help="Model file")
    sub.add_argument("--data", help="CSV of observations to explain")
    sub.add_argument("--background", help="CSV to draw the background sample from (default: --data)")
    sub.add_argument("--method", choices=["exact", "sampled"], help="Shapley method")
    sub.add_argument("--n-permutations", type=int, help="Permutations for the sampled method")
    sub.add_argument("--background-size", type=int, help="Background rows")
    sub.add_argument("--n-rows", type=int, help="Explain only the first N rows")
    sub.add_argument("--features", help="Comma-separated features for dependence tables (default: all)")
    sub.add_argument("--seed", type=int, help="Run seed")
    sub.add_argument("--n-jobs", type=int, help="Parallel workers")

    sub = add("replay", "Re-run a command from its manifest")
    sub.add_argument("--manifest", help="Manifest JSON")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    flags = {key: value for key, value in vars(args).items() if key not in ("command", "config", "verbose", "out_dir")}
    try:
        config = build_run_config(args.command, flags, config_path=args.config, output_dir=args.out_dir)
        config.validate()
        return COMMANDS[args.command](config)
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"✗ Error: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
