"""
Runs CPU-bound sweep cells off the event loop.
"""

from __future__ import annotations

import asyncio
from collections.abc import Awaitable, Callable
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor

from ..exception import wrap_base_exception
from ..experiment import run_cell
from ..message import CellCompleted, CellFailed, Message, TrainCell
from . import Module

__all__ = ["CellRunner"]


class CellRunner(Module[TrainCell]):
    """Executes :class:`TrainCell` commands in a process pool, or one worker thread when ``workers == 1``."""

    def __init__(self, *_, workers: int = 1, **kwargs) -> None:
        super().__init__(**kwargs)
        self.workers = workers
        self._executor: Executor | None = None

    async def on_start(self) -> None:
        if self.workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        else:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="blurcast-cell")
        self._logger.info(f"Cell runner started with {self.workers} worker(s)")
        await super().on_start()

    async def on_stop(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None
        await super().on_stop()

    async def handle(self, message: TrainCell, *, handler: Callable[[Message], Awaitable[None]]) -> None:
        if self._executor is None:
            raise RuntimeError("CellRunner used before on_start")
        loop = asyncio.get_running_loop()
        self._logger.info(f"Dispatching cell {message.cell}")
        try:
            outcome = await loop.run_in_executor(self._executor, run_cell, message.cell, message.experiment, message.out_dir)
        except asyncio.CancelledError:
            raise
        except BaseException as error:
            wrapped = wrap_base_exception(error)
            self._logger.error(f"Cell {message.cell} failed: {type(wrapped).__name__}: {wrapped}")
            await handler(CellFailed(cell=message.cell, error=wrapped, created_by=type(self).__name__))
            return
        self._logger.info(f"Cell {message.cell} completed")
        await handler(CellCompleted(cell=message.cell, outcome=outcome, created_by=type(self).__name__))
