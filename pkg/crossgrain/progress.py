"""Live rich progress display for training epochs.

Enabled with the ``--progress`` CLI flag, which also lowers the log level to
WARNING so the bars stay readable.  An instance is passed wherever the
pipeline accepts an ``on_epoch(phase, epoch, loss)`` callback.
"""

from __future__ import annotations

import logging
from types import TracebackType
from typing import Any

logger = logging.getLogger(__name__)


class TrainingProgress:
    """One progress row per training phase with the latest loss."""

    def __init__(self, enabled: bool = True) -> None:
        self._enabled = enabled
        self._progress: Any = None
        self._tasks: dict[str, Any] = {}

    def __enter__(self) -> TrainingProgress:
        if not self._enabled:
            return self
        try:
            from rich.console import Console
            from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn

            self._progress = Progress(
                SpinnerColumn(),
                TextColumn("[bold cyan]{task.description:<28}[/bold cyan]"),
                TextColumn("epoch {task.completed:>4.0f}"),
                TextColumn("[dim]loss {task.fields[loss]}[/dim]"),
                TimeElapsedColumn(),
                console=Console(stderr=True),
                refresh_per_second=4,
                transient=False,
            )
            self._progress.start()
        except Exception as exc:
            logger.debug("TrainingProgress: progress display unavailable: %s", exc)
            self._progress = None
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        if self._progress is not None:
            self._progress.stop()
            self._progress = None

    def __call__(self, phase: str, epoch: int, loss: float) -> None:
        if self._progress is None:
            return
        task = self._tasks.get(phase)
        if task is None:
            task = self._progress.add_task(phase, total=None, loss="-")
            self._tasks[phase] = task
        self._progress.update(task, completed=epoch + 1, loss=f"{loss:.6f}")

    @property
    def phases_seen(self) -> list[str]:
        return list(self._tasks)
