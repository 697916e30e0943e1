from __future__ import annotations

from collections.abc import Awaitable, Callable

from ..message import CellCompleted, CellFailed, Message
from . import Module

__all__ = ["ResultCollector"]


class ResultCollector(Module[tuple[CellCompleted, CellFailed]]):
    """Gathers the outcome of every sweep cell."""

    def __init__(self, *_, **kwargs) -> None:
        super().__init__(**kwargs)
        self.completed: list[CellCompleted] = []
        self.failed: list[CellFailed] = []

    async def handle(self, message: CellCompleted | CellFailed, *, handler: Callable[[Message], Awaitable[None]]) -> None:
        match message:
            case CellCompleted():
                self.completed.append(message)
            case CellFailed():
                self.failed.append(message)
