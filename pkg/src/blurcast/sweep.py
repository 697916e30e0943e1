"""
Ablation sweeps: every ``variant x horizon x seed`` cell is sent through the
mediator as a :class:`TrainCell` command and its outcome collected as an event.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import ExperimentConfig
from .experiment import CellOutcome, SweepCell
from .mediator import Mediator
from .message import CellFailed, TrainCell
from .modules.collector import ResultCollector
from .modules.runner import CellRunner

__all__ = ["SweepOutcome", "run_sweep", "sweep_cells"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True, kw_only=True, slots=True)
class SweepOutcome:
    completed: tuple[CellOutcome, ...] = ()
    failed: tuple[CellFailed, ...] = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return not self.failed


def sweep_cells(experiment: ExperimentConfig) -> list[SweepCell]:
    return [
        SweepCell(dataset=experiment.dataset.name, variant=variant, horizon=horizon, seed=seed)
        for variant, horizon, seed in itertools.product(experiment.variants, experiment.window.horizons, experiment.seeds)
    ]


async def run_sweep(experiment: ExperimentConfig, out_dir: Path, *, workers: int = 1) -> SweepOutcome:
    """Run every cell; a failing cell is recorded and the remaining cells still run."""
    cells = sweep_cells(experiment)
    logger.info(f"Sweep of {len(cells)} cells with {workers} worker(s) into {out_dir}")
    mediator = Mediator()
    runner = CellRunner(workers=workers)
    collector = ResultCollector()
    mediator.attach(runner)
    mediator.attach(collector)
    try:
        await mediator.start()
        async with mediator.context() as context:
            for cell in cells:
                await context.process(TrainCell(cell=cell, experiment=experiment, out_dir=out_dir, created_by="sweep"))
    finally:
        await mediator.stop()

    order = {cell: index for index, cell in enumerate(cells)}
    completed = sorted((event.outcome for event in collector.completed), key=lambda o: order[o.cell])
    failed = sorted(collector.failed, key=lambda event: order[event.cell])
    for event in failed:
        logger.critical(f"Cell {event.cell} failed: {event.error}")
    logger.info(f"Sweep finished: {len(completed)} completed, {len(failed)} failed")
    return SweepOutcome(completed=tuple(completed), failed=tuple(failed))
