"""
Per-epoch training trace for debugging and reporting.

This module records what each epoch of a task produced (losses, validation
accuracy, whether the early-stopping monitor improved) and how the task
ended, and renders it as a readable trace.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any


class StopReason(Enum):
    """Why training on a task ended."""

    PATIENCE = "patience"
    MAX_EPOCHS = "max_epochs"


@dataclass
class EpochRecord:
    """One epoch of training on a task."""

    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    improved: bool

    def get_summary(self) -> str:
        mark = "*" if self.improved else " "
        return (
            f"{mark} epoch {self.epoch:>3}  train {self.train_loss:.6f}  "
            f"val {self.val_loss:.6f}  acc {self.val_accuracy:.3f}"
        )


@dataclass
class TaskTrace:
    """All epochs of one task plus the outcome of early stopping."""

    task_id: int
    task_name: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: StopReason = StopReason.MAX_EPOCHS
    buffer_size: int = 0

    def add_epoch(self, record: EpochRecord) -> None:
        self.epochs.append(record)
        if record.improved:
            self.best_epoch = record.epoch

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.epochs), default=float("inf"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "task_name": self.task_name,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason.value,
            "buffer_size": self.buffer_size,
            "epochs": [asdict(r) for r in self.epochs],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TaskTrace:
        trace = cls(
            task_id=int(data["task_id"]),
            task_name=str(data["task_name"]),
            best_epoch=int(data["best_epoch"]),
            stop_reason=StopReason(data["stop_reason"]),
            buffer_size=int(data.get("buffer_size", 0)),
        )
        trace.epochs = [EpochRecord(**r) for r in data["epochs"]]
        return trace


@dataclass
class TrainingTrace:
    """Complete trace of a task sequence."""

    tasks: list[TaskTrace] = field(default_factory=list)

    def add_task(self, trace: TaskTrace) -> None:
        self.tasks.append(trace)

    @property
    def total_epochs(self) -> int:
        return sum(len(t.epochs) for t in self.tasks)

    def print_trace(self, verbose: bool = False) -> None:
        """Print the complete training trace."""
        print("\n" + "=" * 70)
        print("TRAINING TRACE")
        print("=" * 70)

        for task in self.tasks:
            print(f"\nTask {task.task_id}: {task.task_name}")
            print("-" * 70)
            shown = task.epochs if verbose else [r for r in task.epochs if r.improved]
            for record in shown:
                print(record.get_summary())
            print(
                f"  stopped: {task.stop_reason.value} after {len(task.epochs)} epochs, "
                f"restored epoch {task.best_epoch}, buffer {task.buffer_size}"
            )

        print("\n" + "-" * 70)
        print("STATISTICS")
        print("-" * 70)
        print(f"Tasks: {len(self.tasks)}")
        print(f"Total epochs: {self.total_epochs}")

    def get_summary(self) -> list[str]:
        """One line per task: best epoch and validation loss."""
        return [
            f"task {t.task_id} ({t.task_name}): best epoch {t.best_epoch}, "
            f"val loss {t.best_val_loss:.6f}, {t.stop_reason.value}"
            for t in self.tasks
        ]

    def to_list(self) -> list[dict[str, Any]]:
        return [t.to_dict() for t in self.tasks]

    @classmethod
    def from_list(cls, data: list[dict[str, Any]]) -> TrainingTrace:
        return cls([TaskTrace.from_dict(d) for d in data])
