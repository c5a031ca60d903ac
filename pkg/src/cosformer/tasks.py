"""
Task and class descriptors shared by the model, the data stream and training.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from .errors import ContractViolation


class Scenario(Enum):
    """Evaluation protocol."""

    TASK_IL = "task-il"  # task identity and its class boundary are known
    CLASS_IL = "class-il"  # blind to the task, all seen classes compete

    @classmethod
    def parse(cls, value: Union[str, "Scenario"]) -> "Scenario":
        if isinstance(value, Scenario):
            return value
        normalized = value.strip().lower().replace("_", "-")
        for scenario in cls:
            if scenario.value == normalized:
                return scenario
        raise ContractViolation(f"Unknown scenario: {value}. Must be task-il or class-il.")


@dataclass(frozen=True)
class ClassSpec:
    """One class of a task: its name text and the label it decodes to."""

    class_id: int
    name: str
    label_words: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.label_words:
            raise ContractViolation(f"class '{self.name}' has an empty label")
        if any(not w or w.startswith("<") for w in self.label_words):
            raise ContractViolation(f"class '{self.name}' label contains a special token")


@dataclass(frozen=True)
class TaskSpec:
    """A task in the stream: dense id plus its ordered classes."""

    task_id: int
    name: str
    classes: tuple[ClassSpec, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ContractViolation(f"task {self.task_id} class ids must be 0..c-1, got {ids}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def with_id(self, task_id: int) -> "TaskSpec":
        return TaskSpec(task_id, self.name, self.classes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "classes": [
                {"class_id": c.class_id, "name": c.name, "label_words": list(c.label_words)}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TaskSpec":
        return cls(
            task_id=int(data["task_id"]),
            name=str(data["name"]),
            classes=tuple(
                ClassSpec(int(c["class_id"]), str(c["name"]), tuple(c["label_words"]))
                for c in data["classes"]
            ),
        )


def validate_task_ids(tasks: list[TaskSpec]) -> None:
    """Task ids must be contiguous from 0 in list order."""
    ids = [t.task_id for t in tasks]
    if ids != list(range(len(ids))):
        raise ContractViolation(f"task ids must be contiguous from 0, got {ids}")
