from __future__ import annotations

from dataclasses import dataclass, field
from datetime import UTC, datetime
from pathlib import Path

from .config import ExperimentConfig
from .experiment import CellOutcome, SweepCell

__all__ = [
    "CellCompleted",
    "CellFailed",
    "Command",
    "Event",
    "FailureEvent",
    "Message",
    "SuccessEvent",
    "TrainCell",
]


@dataclass(frozen=True, kw_only=True, slots=True)
class Message:
    created_at: datetime = field(default_factory=lambda: datetime.now(tz=UTC))
    created_by: str | type | None = None


@dataclass(frozen=True, kw_only=True, slots=True)
class Command(Message): ...


@dataclass(frozen=True, kw_only=True, slots=True)
class Event(Message): ...


@dataclass(frozen=True, kw_only=True, slots=True)
class SuccessEvent(Event): ...


@dataclass(frozen=True, kw_only=True, slots=True)
class FailureEvent(Event):
    error: Exception


@dataclass(frozen=True, kw_only=True, slots=True)
class TrainCell(Command):
    """Train and evaluate one ``(variant, horizon, seed)`` cell of a sweep."""

    cell: SweepCell
    experiment: ExperimentConfig = field(repr=False)
    out_dir: Path


@dataclass(frozen=True, kw_only=True, slots=True)
class CellCompleted(SuccessEvent):
    cell: SweepCell
    outcome: CellOutcome = field(repr=False)


@dataclass(frozen=True, kw_only=True, slots=True)
class CellFailed(FailureEvent):
    cell: SweepCell
