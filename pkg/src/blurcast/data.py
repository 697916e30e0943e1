"""
Series ingestion, synthetic multi-scale series, z-score normalization,
windowing and temporally contiguous splitting.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .exception import (
    BadFractions,
    ChannelMismatch,
    EmptyFile,
    EmptySplit,
    IndexGap,
    InvalidConfig,
    MissingColumn,
    NonNumericCell,
    SeriesTooShort,
)
from .numerics import RngStream

__all__ = [
    "NormStats",
    "RawSeries",
    "SynthConfig",
    "Window",
    "WindowBatch",
    "WindowSplit",
    "add_time_features",
    "load_csv",
    "make_windows",
    "split_windows",
    "synth_multiscale",
    "zscore_apply",
    "zscore_fit",
    "zscore_invert",
]

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True, kw_only=True, slots=True)
class RawSeries:
    time_index: np.ndarray
    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...] = ()
    target_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        length = self.time_index.shape[0]
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ChannelMismatch("features and targets must be 2-D (steps x channels)")
        if self.features.shape[0] != length or self.targets.shape[0] != length:
            raise ChannelMismatch(
                f"row counts differ: index {length}, features {self.features.shape[0]}, targets {self.targets.shape[0]}"
            )
        if self.targets.shape[1] < 1:
            raise ChannelMismatch("at least one target channel is required")
        if length > 1 and np.any(np.diff(self.time_index) != 1):
            raise IndexGap(int(np.argmax(np.diff(self.time_index) != 1)) + 1)

    @property
    def length(self) -> int:
        return self.time_index.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    def channels(self) -> np.ndarray:
        """All channels as one ``L x (d_X + d_y)`` matrix, features first."""
        return np.concatenate([self.features, self.targets], axis=1)


@dataclass(frozen=True, kw_only=True, slots=True)
class NormStats:
    """Per-channel statistics over ``[features..., targets...]``."""

    mean: np.ndarray
    std: np.ndarray
    n_features: int = 0

    def invert_targets(self, values: np.ndarray) -> np.ndarray:
        """Map normalized target values (last axis = target channel) back to original units."""
        mean = self.mean[self.n_features :]
        std = self.std[self.n_features :]
        if values.shape[-1] != mean.shape[0]:
            raise ChannelMismatch(f"{values.shape[-1]} target channels, stats have {mean.shape[0]}")
        return values * std + mean


@dataclass(frozen=True, kw_only=True, slots=True)
class Window:
    """
    One sample: ``history`` covers steps ``[cutoff - kappa, cutoff)`` with columns
    ``[features..., targets...]``; ``future`` holds the targets of
    ``[cutoff, cutoff + tau)`` and ``future_features`` the known covariates there.
    """

    history: np.ndarray
    future: np.ndarray
    future_features: np.ndarray
    cutoff: int

    @property
    def kappa(self) -> int:
        return self.history.shape[0]

    @property
    def tau(self) -> int:
        return self.future.shape[0]

    @property
    def n_features(self) -> int:
        return self.future_features.shape[1]

    @property
    def n_targets(self) -> int:
        return self.future.shape[1]

    def history_steps(self) -> range:
        return range(self.cutoff - self.kappa, self.cutoff)

    def future_steps(self) -> range:
        return range(self.cutoff, self.cutoff + self.tau)


@dataclass(frozen=True, kw_only=True, slots=True)
class WindowBatch:
    """Windows stacked along a leading batch axis."""

    history: np.ndarray
    future: np.ndarray
    future_features: np.ndarray
    cutoffs: np.ndarray

    @classmethod
    def stack(cls, windows: Sequence[Window]) -> WindowBatch:
        if not windows:
            raise EmptySplit("cannot stack an empty window collection")
        return cls(
            history=np.stack([w.history for w in windows]),
            future=np.stack([w.future for w in windows]),
            future_features=np.stack([w.future_features for w in windows]),
            cutoffs=np.array([w.cutoff for w in windows], dtype=np.int64),
        )

    def take(self, indices: np.ndarray) -> WindowBatch:
        return WindowBatch(
            history=self.history[indices],
            future=self.future[indices],
            future_features=self.future_features[indices],
            cutoffs=self.cutoffs[indices],
        )

    def __len__(self) -> int:
        return self.history.shape[0]

    @property
    def kappa(self) -> int:
        return self.history.shape[1]

    @property
    def tau(self) -> int:
        return self.future.shape[1]

    @property
    def n_features(self) -> int:
        return self.future_features.shape[2]

    @property
    def n_targets(self) -> int:
        return self.future.shape[2]


@dataclass(frozen=True, kw_only=True, slots=True)
class WindowSplit:
    train: list[Window] = field(default_factory=list)
    validation: list[Window] = field(default_factory=list)
    test: list[Window] = field(default_factory=list)


@dataclass(frozen=True, kw_only=True, slots=True)
class SynthConfig:
    length: int = 3000
    coarse_period: float = 96.0
    coarse_amp: float = 1.0
    fine_period: float = 8.0
    fine_amp: float = 0.3
    ar_coeff: float = 0.5
    ar_std: float = 0.05
    seed: int = 7

    def validate(self, *, min_length: int = 2) -> None:
        if self.length < min_length:
            raise InvalidConfig(f"synth length {self.length} must be at least {min_length} (kappa + tau + 1)")
        if self.coarse_period <= 0 or self.fine_period <= 0:
            raise InvalidConfig("synth periods must be positive")
        if not self.fine_period < self.coarse_period:
            raise InvalidConfig(f"fine_period {self.fine_period} must be below coarse_period {self.coarse_period}")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise InvalidConfig(f"ar_coeff {self.ar_coeff} must lie in [0, 1)")
        if self.ar_std < 0.0:
            raise InvalidConfig("ar_std must be non-negative")


def _positional_encoding(steps: np.ndarray, periods: Sequence[float]) -> tuple[np.ndarray, tuple[str, ...]]:
    columns = []
    names: list[str] = []
    for period in periods:
        angle = 2.0 * np.pi * steps / period
        columns += [np.sin(angle), np.cos(angle)]
        names += [f"sin_{period:g}", f"cos_{period:g}"]
    if not columns:
        return np.zeros((steps.shape[0], 0)), ()
    return np.stack(columns, axis=1), tuple(names)


def add_time_features(series: RawSeries, periods: Sequence[float]) -> RawSeries:
    """Append sin/cos encodings of the step index for each period."""
    encoding, names = _positional_encoding(series.time_index.astype(np.float64), periods)
    return RawSeries(
        time_index=series.time_index,
        features=np.concatenate([series.features, encoding], axis=1),
        targets=series.targets,
        feature_names=series.feature_names + names,
        target_names=series.target_names,
    )


def _to_step_index(column: pd.Series, name: str) -> np.ndarray:
    numeric = pd.to_numeric(column, errors="coerce")
    if numeric.notna().all():
        values = numeric.to_numpy()
        if np.any(values != np.round(values)):
            raise NonNumericCell(int(np.argmax(values != np.round(values))) + 1, name)
        steps = values.astype(np.int64)
        if steps.size > 1 and np.any(np.diff(steps) != 1):
            raise IndexGap(int(np.argmax(np.diff(steps) != 1)) + 2)
        return steps - steps[0]

    stamps = pd.to_datetime(column, errors="coerce", format="ISO8601")
    if stamps.isna().any():
        raise NonNumericCell(int(np.argmax(stamps.isna().to_numpy())) + 1, name)
    if len(stamps) < 2:
        return np.zeros(len(stamps), dtype=np.int64)
    deltas = stamps.diff().iloc[1:]
    stride = deltas.iloc[0]
    if stride <= pd.Timedelta(0) or (deltas != stride).any():
        raise IndexGap(int(np.argmax((deltas != stride).to_numpy())) + 2)
    return np.arange(len(stamps), dtype=np.int64)


def _numeric_block(frame: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    if not columns:
        return np.zeros((len(frame), 0))
    block = np.empty((len(frame), len(columns)))
    for j, name in enumerate(columns):
        parsed = pd.to_numeric(frame[name].str.strip(), errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(parsed)
        if bad.any():
            raise NonNumericCell(int(np.argmax(bad)) + 1, name)
        block[:, j] = parsed
    return block


def load_csv(
    path: Path,
    target_cols: Sequence[str],
    feature_cols: Sequence[str] = (),
    *,
    time_col: str | None = None,
) -> RawSeries:
    """
    Read a UTF-8 CSV with a header row. Rows are numbered from 1 (first data row)
    in error messages.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as error:
        raise EmptyFile(f"`{path}` has no header row") from error
    if frame.empty:
        raise EmptyFile(f"`{path}` has no data rows")
    if not target_cols:
        raise InvalidConfig("at least one target column is required")
    for name in [*target_cols, *feature_cols, *([time_col] if time_col else [])]:
        if name not in frame.columns:
            raise MissingColumn(name, path)

    time_index = _to_step_index(frame[time_col], time_col) if time_col else np.arange(len(frame), dtype=np.int64)
    series = RawSeries(
        time_index=time_index,
        features=_numeric_block(frame, feature_cols),
        targets=_numeric_block(frame, target_cols),
        feature_names=tuple(feature_cols),
        target_names=tuple(target_cols),
    )
    logger.info(f"Loaded `{path}`: {series.length} steps, {series.n_features} features, {series.n_targets} targets")
    return series


def synth_multiscale(cfg: SynthConfig) -> RawSeries:
    """Slow plus fast sinusoid with AR(1) noise; features are sin/cos encodings at both periods."""
    cfg.validate()
    steps = np.arange(cfg.length, dtype=np.float64)
    rng = RngStream(cfg.seed)

    innovations = rng.standard_normal(cfg.length) * cfg.ar_std
    noise = np.empty(cfg.length)
    noise[0] = innovations[0] / math.sqrt(1.0 - cfg.ar_coeff**2)
    for t in range(1, cfg.length):
        noise[t] = cfg.ar_coeff * noise[t - 1] + innovations[t]

    signal = cfg.coarse_amp * np.sin(2.0 * np.pi * steps / cfg.coarse_period) + cfg.fine_amp * np.sin(
        2.0 * np.pi * steps / cfg.fine_period
    )
    features, names = _positional_encoding(steps, [cfg.coarse_period, cfg.fine_period])
    return RawSeries(
        time_index=np.arange(cfg.length, dtype=np.int64),
        features=features,
        targets=(signal + noise)[:, None],
        feature_names=names,
        target_names=("y",),
    )


def zscore_fit(series: RawSeries, train_fraction: float = 0.8) -> NormStats:
    """Per-channel mean and population std over the first ``floor(train_fraction * L)`` steps."""
    if not 0.0 < train_fraction <= 1.0:
        raise InvalidConfig(f"train_fraction {train_fraction} must lie in (0, 1]")
    prefix = max(1, math.floor(train_fraction * series.length))
    channels = series.channels()[:prefix]
    mean = channels.mean(axis=0)
    std = channels.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return NormStats(mean=mean, std=std, n_features=series.n_features)


def _check_channels(series: RawSeries, stats: NormStats) -> None:
    channels = series.n_features + series.n_targets
    if stats.mean.shape[0] != channels or stats.n_features != series.n_features:
        raise ChannelMismatch(f"series has {channels} channels, stats have {stats.mean.shape[0]}")


def _rebuild(series: RawSeries, channels: np.ndarray) -> RawSeries:
    return RawSeries(
        time_index=series.time_index,
        features=channels[:, : series.n_features],
        targets=channels[:, series.n_features :],
        feature_names=series.feature_names,
        target_names=series.target_names,
    )


def zscore_apply(series: RawSeries, stats: NormStats) -> RawSeries:
    _check_channels(series, stats)
    return _rebuild(series, (series.channels() - stats.mean) / stats.std)


def zscore_invert(series: RawSeries, stats: NormStats) -> RawSeries:
    _check_channels(series, stats)
    return _rebuild(series, series.channels() * stats.std + stats.mean)


def make_windows(series: RawSeries, kappa: int, tau: int, stride: int = 1) -> list[Window]:
    if kappa <= 0 or tau <= 0:
        raise InvalidConfig(f"kappa ({kappa}) and tau ({tau}) must be positive")
    if stride < 1:
        raise InvalidConfig(f"stride {stride} must be at least 1")
    if series.length < kappa + tau:
        raise SeriesTooShort(f"series of {series.length} steps is shorter than kappa + tau = {kappa + tau}")

    channels = series.channels()
    count = (series.length - kappa - tau) // stride + 1
    windows = []
    for i in range(count):
        cutoff = kappa + i * stride
        windows.append(
            Window(
                history=channels[cutoff - kappa : cutoff].copy(),
                future=series.targets[cutoff : cutoff + tau].copy(),
                future_features=series.features[cutoff : cutoff + tau].copy(),
                cutoff=cutoff,
            )
        )
    logger.debug(f"Built {count} windows (kappa={kappa}, tau={tau}, stride={stride})")
    return windows


def split_windows(windows: Sequence[Window], fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> WindowSplit:
    """Contiguous split in time order: train earliest, test latest."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions {tuple(fractions)} must be three non-negative values summing to 1")
    n = len(windows)
    n_train, n_validation, _ = _apportion(n, fractions)
    ordered = sorted(windows, key=lambda w: w.cutoff)
    return WindowSplit(
        train=list(ordered[:n_train]),
        validation=list(ordered[n_train : n_train + n_validation]),
        test=list(ordered[n_train + n_validation :]),
    )


def _apportion(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Largest-remainder rounding: every part is within one of its exact share."""
    quotas = [f * n for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    # Leftover windows go to the largest fractional parts, earlier parts first on ties.
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: max(0, n - sum(counts))]:
        counts[i] += 1
    return counts[0], counts[1], counts[2]
