"""
Metrics, multi-seed aggregation and result emission.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from .data import NormStats, Window, WindowBatch
from .exception import DimensionMismatch, EmptyResults, PreconditionViolation, ShapeMismatch
from .numerics import RngStream
from .pipeline import Mode, pipeline_forward
from .trainer import EVAL_STREAM, Checkpoint, predict

__all__ = [
    "AGGREGATE_COLUMNS",
    "AggregateRow",
    "MetricRecord",
    "aggregate",
    "aggregate_group",
    "emit_forecast_points",
    "emit_table",
    "evaluate",
    "mae",
    "mse",
    "read_records",
    "window_errors",
    "write_records",
]

logger = logging.getLogger(__name__)

GROUP_KEYS = ["dataset", "variant", "horizon", "split"]
AGGREGATE_COLUMNS = [*GROUP_KEYS, "mean_mse", "stderr_mse", "mean_mae", "stderr_mae", "n_seeds"]
FAILED = "FAILED"

type Space = Literal["normalized", "original"]


@dataclass(frozen=True, kw_only=True, slots=True)
class MetricRecord:
    dataset: str
    variant: str
    horizon: int
    seed: int
    split: str
    mse: float
    mae: float


@dataclass(frozen=True, kw_only=True, slots=True)
class AggregateRow:
    dataset: str
    variant: str
    horizon: int
    split: str
    mean_mse: float
    stderr_mse: float
    mean_mae: float
    stderr_mae: float
    n_seeds: int


def _check_pair(y: np.ndarray, y_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionMismatch(f"targets have shape {y.shape}, predictions {y_hat.shape}")
    return y, y_hat


def mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = _check_pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def mae(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = _check_pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def _predictions(checkpoint: Checkpoint, windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        raise EmptyResults("no windows to evaluate")
    batch = WindowBatch.stack(windows)
    forecaster = checkpoint.params.forecaster
    if batch.history.shape[1:] != forecaster.in_shape or batch.future.shape[1:] != forecaster.out_shape:
        raise ShapeMismatch(
            f"windows are {batch.history.shape[1:]} -> {batch.future.shape[1:]}, "
            f"checkpoint expects {forecaster.in_shape} -> {forecaster.out_shape}"
        )
    y_hat = predict(checkpoint.params, batch, RngStream(checkpoint.config.seed, EVAL_STREAM))
    return batch.future, y_hat


def window_errors(checkpoint: Checkpoint, windows: Sequence[Window]) -> np.ndarray:
    """Per-window MSE in normalized space."""
    y, y_hat = _predictions(checkpoint, windows)
    return np.mean((y - y_hat) ** 2, axis=(1, 2))


def evaluate(
    checkpoint: Checkpoint,
    windows: Sequence[Window],
    stats: NormStats,
    *,
    dataset: str = "synthetic",
    split: str = "test",
    space: Space = "normalized",
) -> MetricRecord:
    """Infer-mode metrics pooled within each window, then averaged over windows."""
    y, y_hat = _predictions(checkpoint, windows)
    if space == "original":
        y, y_hat = stats.invert_targets(y), stats.invert_targets(y_hat)
    errors = y - y_hat
    record = MetricRecord(
        dataset=dataset,
        variant=checkpoint.params.variant.value,
        horizon=y.shape[1],
        seed=checkpoint.config.seed,
        split=split,
        mse=float(np.mean(np.mean(errors**2, axis=(1, 2)))),
        mae=float(np.mean(np.mean(np.abs(errors), axis=(1, 2)))),
    )
    logger.debug(f"Evaluated {record}")
    return record


def _frame(records: Iterable[MetricRecord]) -> pd.DataFrame:
    columns = [f.name for f in fields(MetricRecord)]
    return pd.DataFrame([asdict(r) for r in records], columns=columns)


def aggregate(records: Iterable[MetricRecord]) -> list[AggregateRow]:
    """Mean and standard error (sample std / sqrt(n)) per ``(dataset, variant, horizon, split)``."""
    frame = _frame(records)
    if frame.empty:
        return []
    grouped = frame.groupby(GROUP_KEYS, sort=True)
    stats = grouped.agg(
        mean_mse=("mse", "mean"),
        std_mse=("mse", "std"),
        mean_mae=("mae", "mean"),
        std_mae=("mae", "std"),
        n_seeds=("seed", "count"),
    ).reset_index()
    rows = []
    for item in stats.itertuples(index=False):
        n = int(item.n_seeds)
        scale = math.sqrt(n)
        rows.append(
            AggregateRow(
                dataset=str(item.dataset),
                variant=str(item.variant),
                horizon=int(item.horizon),
                split=str(item.split),
                mean_mse=float(item.mean_mse),
                stderr_mse=float(item.std_mse) / scale if n > 1 else 0.0,
                mean_mae=float(item.mean_mae),
                stderr_mae=float(item.std_mae) / scale if n > 1 else 0.0,
                n_seeds=n,
            )
        )
    return rows


def aggregate_group(records: Sequence[MetricRecord]) -> AggregateRow:
    """Aggregate records that must all share one group key."""
    if not records:
        raise EmptyResults("no records to aggregate")
    keys = {(r.dataset, r.variant, r.horizon, r.split) for r in records}
    if len(keys) != 1:
        raise PreconditionViolation(f"records span {len(keys)} groups: {sorted(keys, key=str)}")
    return aggregate(records)[0]


def _rows_frame(rows: Iterable[AggregateRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=AGGREGATE_COLUMNS)


def _markdown(rows: Sequence[AggregateRow], metric: str, failed: Iterable[tuple[str, str, int, str]]) -> str:
    cells: dict[tuple[str, str], dict[int, dict[str, str]]] = {}
    variants: dict[tuple[str, str], list[str]] = {}
    for row in rows:
        mean, stderr = getattr(row, f"mean_{metric}"), getattr(row, f"stderr_{metric}")
        cells.setdefault((row.dataset, row.split), {}).setdefault(row.horizon, {})[row.variant] = (
            f"{mean:.3f} ±{stderr:.3f}"
        )
    for dataset, variant, horizon, split in failed:
        cells.setdefault((dataset, split), {}).setdefault(horizon, {})[variant] = FAILED
    for key, table in cells.items():
        seen = variants.setdefault(key, [])
        for row_cells in table.values():
            seen += [v for v in row_cells if v not in seen]

    blocks = []
    for (dataset, split), table in sorted(cells.items()):
        header = variants[(dataset, split)]
        lines = [
            f"## {dataset} ({split}, {metric.upper()})",
            "",
            "| horizon | " + " | ".join(header) + " |",
            "|---" * (len(header) + 1) + "|",
        ]
        for horizon in sorted(table):
            lines.append(f"| {horizon} | " + " | ".join(table[horizon].get(v, "") for v in header) + " |")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def emit_table(
    rows: Sequence[AggregateRow],
    path: Path,
    format: Literal["csv", "markdown"] = "csv",
    *,
    metric: Literal["mse", "mae"] = "mse",
    failed: Iterable[tuple[str, str, int, str]] = (),
) -> Path:
    """
    Write aggregate rows as CSV (fixed column order) or as markdown with one table
    per dataset, variants as columns and horizons as rows. ``failed`` cells
    ``(dataset, variant, horizon, split)`` render as ``FAILED`` in markdown.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "csv":
        _rows_frame(rows).to_csv(path, index=False, lineterminator="\n")
    else:
        path.write_text(_markdown(rows, metric, failed), encoding="utf-8", newline="\n")
    logger.info(f"Wrote {format} table with {len(rows)} rows to {path}")
    return path


def emit_forecast_points(
    checkpoint: Checkpoint,
    window: Window,
    stats: NormStats,
    path: Path,
    *,
    channel: int = 0,
    eps: np.ndarray | None = None,
) -> Path:
    """
    Normalized ``step, y_true, y_f, y_b, y_d`` rows of one window and one target
    channel; stages the variant lacks are left empty.
    """
    if not 0 <= channel < window.n_targets or stats.mean.shape[0] - stats.n_features != window.n_targets:
        raise ShapeMismatch(f"channel {channel} is not a target of this window")
    output = pipeline_forward(
        checkpoint.params, window, Mode.INFER, RngStream(checkpoint.config.seed, EVAL_STREAM), eps=eps
    )
    frame = pd.DataFrame(
        {
            "step": np.asarray(window.future_steps()),
            "y_true": window.future[:, channel],
            "y_f": output.y_f[:, channel],
            "y_b": output.y_b[:, channel] if output.y_b is not None else np.full(window.tau, np.nan),
            "y_d": output.y_d[:, channel],
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")
    logger.info(f"Wrote forecast points for window at step {window.cutoff} to {path}")
    return path


def write_records(records: Iterable[MetricRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    _frame(records).to_csv(path, index=False, lineterminator="\n")
    return path


def read_records(path: Path) -> list[MetricRecord]:
    frame = pd.read_csv(path, dtype={"dataset": str, "variant": str, "split": str})
    missing = [f.name for f in fields(MetricRecord) if f.name not in frame.columns]
    if missing:
        raise PreconditionViolation(f"`{path}` lacks record columns {missing}")
    return [
        MetricRecord(
            dataset=str(row.dataset),
            variant=str(row.variant),
            horizon=int(row.horizon),
            seed=int(row.seed),
            split=str(row.split),
            mse=float(row.mse),
            mae=float(row.mae),
        )
        for row in frame.itertuples(index=False)
    ]
