"""
Command-line entry point: ``blurcast {synth,train,ablate,gradcheck,report,tune}``.

Exit codes: 0 on success, 1 on internal (numerical or storage) failures and
failed sweep cells, 2 on user or configuration errors.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
from collections.abc import Callable, Coroutine, Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import dotenv
import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, load_config, save_config
from .data import synth_multiscale
from .eval_report import (
    MetricRecord,
    aggregate,
    emit_forecast_points,
    emit_table,
    read_records,
    window_errors,
    write_records,
)
from .exception import DomainError, EmptyResults, InvalidConfig, NumericalError, StorageError
from .experiment import CHECKPOINT_FILE, RECORDS_FILE, SweepCell, cell_dir, prepare, train_cell
from .gradcheck import ToyDims, default_checks, run_gradchecks
from .logging import configure_global_logging, configure_logger
from .pipeline import Variant
from .sweep import run_sweep
from .trainer import grid_search

__all__ = ["main"]

logger = logging.getLogger(__name__)
configure_logger(logger)

ENV_OUT_DIR = "BLURCAST_OUT_DIR"
ENV_WORKERS = "BLURCAST_WORKERS"
EXPERIMENT_FILE = "experiment.yaml"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2


def _variant(text: str) -> Variant:
    try:
        return Variant.parse(text)
    except InvalidConfig as error:
        raise argparse.ArgumentTypeError(str(error)) from error


def _create_parser(*, prog: str, description: str, version: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=prog, description=description)
    parser.add_argument("--env-file", type=Path, default=Path(".env"), help="Path to the environment file.")
    parser.add_argument(
        "--verbose", "-v", action="count", default=0, required=False, help="Increase the verbosity level."
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default="INFO",
        help="Set the logging level (default: INFO).",
    )
    parser.add_argument("--log-file", type=Path, help="Path to the log file for file logging (optional).")
    parser.add_argument("--version", action="version", version=f"%(prog)s {version}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment file (defaults when omitted).")
    common.add_argument("--out", type=Path, help="Output directory (overrides the config and BLURCAST_OUT_DIR).")

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument("--variant", type=_variant, help="Variant (default: first configured).")
    cell.add_argument("--horizon", type=int, help="Forecast horizon tau (default: first configured).")
    cell.add_argument("--seed", type=int, help="Seed (default: first configured).")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="Write the synthetic series as CSV.")
    commands.add_parser("train", parents=[common, cell], help="Train one variant, horizon and seed.")
    ablate = commands.add_parser("ablate", parents=[common], help="Run the variant x horizon x seed sweep.")
    ablate.add_argument("--workers", type=int, help="Concurrent sweep cells (overrides BLURCAST_WORKERS).")
    commands.add_parser("gradcheck", parents=[common], help="Finite-difference check of every gradient.")
    report = commands.add_parser("report", parents=[common], help="Aggregate the records of a results directory.")
    report.add_argument("results_dir", type=Path, nargs="?", help="Results directory (default: --out).")
    commands.add_parser("tune", parents=[common, cell], help="Grid search over width, depth and warm-up.")
    return parser


def _get_env(env_file: Path, *, optional_variables: list[str]) -> dict[str, str]:
    dotenv.load_dotenv(env_file)
    return {name: os.environ[name].strip('"') for name in optional_variables if name in os.environ}


def log_configuration(
    configuration: argparse.Namespace, *, logger: logging.Logger, level: int = logging.DEBUG, prefix: str = ""
) -> None:
    for argument_name, argument_value in sorted(vars(configuration).items()):
        full_name = f"{prefix}{argument_name}" if prefix else argument_name
        if isinstance(argument_value, argparse.Namespace):
            log_configuration(argument_value, logger=logger, level=level, prefix=f"{full_name}.")
        else:
            logger.log(level, f"{full_name}: {argument_value}")


def execute(coroutine: Coroutine[Any, Any, int]) -> int:
    if sys.platform == "win32":
        asyncio.set_event_loop_policy(asyncio.WindowsSelectorEventLoopPolicy())  # type: ignore[attr-defined]
    return asyncio.run(coroutine)


def _experiment(args: argparse.Namespace, env: dict[str, str]) -> ExperimentConfig:
    """Config file, then environment, then flags."""
    experiment = load_config(args.config)
    output = experiment.output
    if ENV_OUT_DIR in env:
        output = replace(output, dir=Path(env[ENV_OUT_DIR]))
    if ENV_WORKERS in env:
        try:
            output = replace(output, workers=int(env[ENV_WORKERS]))
        except ValueError as error:
            raise InvalidConfig(f"{ENV_WORKERS} must be an integer, got `{env[ENV_WORKERS]}`") from error
    if args.out is not None:
        output = replace(output, dir=args.out)
    if getattr(args, "workers", None) is not None:
        output = replace(output, workers=args.workers)
    if output.workers < 1:
        raise InvalidConfig(f"workers {output.workers} must be at least 1")
    return replace(experiment, output=output)


def _cell(args: argparse.Namespace, experiment: ExperimentConfig) -> SweepCell:
    return SweepCell(
        dataset=experiment.dataset.name,
        variant=args.variant if args.variant is not None else experiment.variants[0],
        horizon=args.horizon if args.horizon is not None else experiment.window.horizons[0],
        seed=args.seed if args.seed is not None else experiment.seeds[0],
    )


def cmd_synth(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    series = synth_multiscale(experiment.dataset.synth)
    frame = pd.DataFrame({"time": series.time_index})
    for j, name in enumerate(series.feature_names):
        frame[name] = series.features[:, j]
    for j, name in enumerate(series.target_names):
        frame[name] = series.targets[:, j]
    path = experiment.output.dir / "synth.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Wrote {series.length} synthetic steps to {path}")
    print(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    cell = _cell(args, experiment)
    if cell.horizon < 1:
        raise InvalidConfig(f"horizon {cell.horizon} must be positive")
    directory = experiment.output.dir
    _, checkpoint = train_cell(cell, experiment, directory)
    logger.info(f"Trained {cell}: best epoch {checkpoint.best_epoch} of {len(checkpoint.history)}")
    print(directory / CHECKPOINT_FILE)
    return EXIT_OK


def _write_summary(
    records: Sequence[MetricRecord], out_dir: Path, failed: Sequence[tuple[str, str, int, str]] = ()
) -> Path:
    rows = aggregate(records)
    emit_table(rows, out_dir / "summary.csv", "csv")
    emit_table(rows, out_dir / "summary_mse.md", "markdown", metric="mse", failed=failed)
    emit_table(rows, out_dir / "summary_mae.md", "markdown", metric="mae", failed=failed)
    return out_dir / "summary_mse.md"


async def _ablate(experiment: ExperimentConfig) -> int:
    out_dir = experiment.output.dir
    save_config(experiment, out_dir / EXPERIMENT_FILE)
    outcome = await run_sweep(experiment, out_dir, workers=experiment.output.workers)
    records = [record for cell in outcome.completed for record in cell.records]
    write_records(records, out_dir / "all_records.csv")
    failed = [(e.cell.dataset, e.cell.variant.value, e.cell.horizon, "test") for e in outcome.failed]
    summary = _write_summary([r for r in records if r.split == "test"], out_dir, failed)
    print(summary.read_text(encoding="utf-8"), end="")
    for event in outcome.failed:
        print(f"FAILED {event.cell}: {type(event.error).__name__}: {event.error}", file=sys.stderr)
    return EXIT_OK if outcome.ok else EXIT_INTERNAL


def cmd_ablate(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    return execute(_ablate(experiment))


def cmd_gradcheck(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    dims = ToyDims()
    print(f"toy dimensions: {dims}")
    results = run_gradchecks(default_checks(dims))
    for result in results:
        status = "pass" if result.passed else "FAIL"
        print(f"{result.name:<26} {result.max_rel_err:.3e} <= {result.tolerance:g}  {status}")
    failures = [r.name for r in results if not r.passed]
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def _forecast_points(results_dir: Path, experiment: ExperimentConfig) -> None:
    """Forecast points of the best and worst test window of the first DG cell found."""
    for horizon in experiment.window.horizons:
        for seed in experiment.seeds:
            cell = SweepCell(dataset=experiment.dataset.name, variant=Variant.DG, horizon=horizon, seed=seed)
            path = cell_dir(results_dir, cell) / CHECKPOINT_FILE
            if not path.is_file():
                continue
            checkpoint = load_checkpoint(path)
            prepared = prepare(experiment, horizon)
            if not prepared.split.test:
                continue
            errors = window_errors(checkpoint, prepared.split.test)
            for label, index in (("best", int(np.argmin(errors))), ("worst", int(np.argmax(errors)))):
                emit_forecast_points(
                    checkpoint, prepared.split.test[index], prepared.stats, results_dir / f"forecast_{label}.csv"
                )
            return
    logger.info("No DG checkpoint found; skipping forecast points")


def cmd_report(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    results_dir = args.results_dir if args.results_dir is not None else experiment.output.dir
    files = sorted(results_dir.rglob(RECORDS_FILE)) if results_dir.is_dir() else []
    records = [record for path in files for record in read_records(path)]
    if not records:
        raise EmptyResults(f"no metric records under `{results_dir}`")
    summary = _write_summary([r for r in records if r.split == "test"] or records, results_dir)
    stored = results_dir / EXPERIMENT_FILE
    if stored.is_file():
        _forecast_points(results_dir, load_config(stored))
    print(summary.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, experiment: ExperimentConfig) -> int:
    cell = _cell(args, experiment)
    prepared = prepare(experiment, cell.horizon)
    search = experiment.search
    cells, selected = grid_search(
        prepared.split,
        experiment.train_config(cell.variant, cell.seed),
        hidden=search.hidden,
        layers=search.layers,
        warmups=search.warmups,
    )
    frame = pd.DataFrame(
        {
            "hidden": [c.backbone.hidden for c in cells],
            "layers": [c.backbone.layers for c in cells],
            "warmup_steps": [c.warmup_steps for c in cells],
            "validation_mse": [c.validation_mse for c in cells],
            "selected": [
                c.backbone == selected.backbone and c.warmup_steps == selected.warmup_steps for c in cells
            ],
        }
    )
    path = experiment.output.dir / "tune.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    print(f"selected {selected.backbone} warmup={selected.warmup_steps} ({path})")
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, ExperimentConfig], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "tune": cmd_tune,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _create_parser(
        prog="blurcast", description="Forecast, blur and denoise benchmark harness.", version=__version__
    )
    args = parser.parse_args(argv)
    configure_global_logging(log_level=args.log_level, log_file=args.log_file, verbose=args.verbose)
    log_configuration(args, logger=logger)
    try:
        env = _get_env(args.env_file, optional_variables=[ENV_OUT_DIR, ENV_WORKERS])
        experiment = _experiment(args, env)
        return COMMANDS[args.command](args, experiment)
    except DomainError as error:
        print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_USER
    except (NumericalError, StorageError) as error:
        print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as error:
        print(f"error: {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as error:
        logger.debug("Unexpected failure", exc_info=True)
        print(f"error: unexpected {type(error).__name__}: {error}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
