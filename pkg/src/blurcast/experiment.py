"""
Data preparation and the unit of work of a sweep: one ``(variant, horizon, seed)`` cell.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import pandas as pd

from .checkpoint import save_checkpoint
from .config import DatasetConfig, ExperimentConfig
from .data import (
    NormStats,
    RawSeries,
    WindowSplit,
    add_time_features,
    load_csv,
    make_windows,
    split_windows,
    synth_multiscale,
    zscore_apply,
    zscore_fit,
)
from .eval_report import MetricRecord, evaluate, write_records
from .pipeline import Variant
from .trainer import Checkpoint, EpochRecord, train

__all__ = [
    "CellOutcome",
    "Prepared",
    "SweepCell",
    "cell_dir",
    "load_series",
    "prepare",
    "run_cell",
    "train_cell",
    "write_history",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.fbd"
HISTORY_FILE = "history.csv"
RECORDS_FILE = "records.csv"


@dataclass(frozen=True, kw_only=True, slots=True)
class SweepCell:
    dataset: str
    variant: Variant
    horizon: int
    seed: int

    def __str__(self) -> str:
        return f"{self.dataset}/{self.variant}/h{self.horizon}/s{self.seed}"


@dataclass(frozen=True, kw_only=True, slots=True)
class Prepared:
    series: RawSeries
    stats: NormStats
    split: WindowSplit


@dataclass(frozen=True, kw_only=True, slots=True)
class CellOutcome:
    cell: SweepCell
    directory: Path
    records: tuple[MetricRecord, ...] = ()


@functools.cache
def load_series(dataset: DatasetConfig) -> RawSeries:
    """Raw (unnormalized) series for a dataset section; cached per process."""
    if dataset.csv is not None:
        series = load_csv(dataset.csv, dataset.target_cols, dataset.feature_cols, time_col=dataset.time_col)
    else:
        series = synth_multiscale(dataset.synth)
    if dataset.time_periods:
        series = add_time_features(series, dataset.time_periods)
    return series


def prepare(experiment: ExperimentConfig, horizon: int) -> Prepared:
    window = experiment.window
    series = load_series(experiment.dataset)
    stats = zscore_fit(series, window.fractions[0])
    windows = make_windows(zscore_apply(series, stats), window.kappa, horizon, window.stride)
    split = split_windows(windows, window.fractions)
    logger.info(
        f"Prepared {experiment.dataset.name} tau={horizon}: "
        f"{len(split.train)}/{len(split.validation)}/{len(split.test)} windows"
    )
    return Prepared(series=series, stats=stats, split=split)


def cell_dir(out_dir: Path, cell: SweepCell) -> Path:
    return out_dir / cell.dataset / f"{cell.variant}-h{cell.horizon}-s{cell.seed}"


def write_history(history: tuple[EpochRecord, ...], path: Path) -> Path:
    columns = ["epoch", "stage", "train_loss", "train_mse", "validation_mse"]
    frame = pd.DataFrame([asdict(r) for r in history], columns=columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")
    return path


def train_cell(cell: SweepCell, experiment: ExperimentConfig, directory: Path) -> tuple[Prepared, Checkpoint]:
    """Train one cell and write its checkpoint and per-epoch history into ``directory``."""
    prepared = prepare(experiment, cell.horizon)
    checkpoint = train(prepared.split, experiment.train_config(cell.variant, cell.seed))
    save_checkpoint(checkpoint, directory / CHECKPOINT_FILE)
    write_history(checkpoint.history, directory / HISTORY_FILE)
    return prepared, checkpoint


def run_cell(cell: SweepCell, experiment: ExperimentConfig, out_dir: Path) -> CellOutcome:
    """Train, then evaluate on the validation and test splits; runs inside a worker."""
    directory = cell_dir(out_dir, cell)
    prepared, checkpoint = train_cell(cell, experiment, directory)
    records = [
        evaluate(checkpoint, windows, prepared.stats, dataset=cell.dataset, split=name)
        for name, windows in (("validation", prepared.split.validation), ("test", prepared.split.test))
        if windows
    ]
    write_records(records, directory / RECORDS_FILE)
    return CellOutcome(cell=cell, directory=directory, records=tuple(records))
