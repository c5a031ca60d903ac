"""
Continual-learning metrics: the accuracy matrix, average accuracy,
forgetting and the silhouette score of head-input embeddings.
"""

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .errors import ContractViolation, FormatError

MATRIX_FIELDS = ("stage", "task", "accuracy")


class AccuracyMatrix:
    """a[stage][task]: test accuracy on ``task`` after training through ``stage``.

    Only the lower triangle (task <= stage) is ever defined.
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ContractViolation("an accuracy matrix needs at least one task")
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def record(self, stage: int, task: int, accuracy: float) -> None:
        if not 0 <= task <= stage < self.n_tasks:
            raise ContractViolation(f"a[{stage}][{task}] is outside the lower triangle")
        if not 0.0 <= accuracy <= 1.0:
            raise ContractViolation(f"accuracy {accuracy} outside [0, 1]")
        self.values[stage, task] = accuracy

    def get(self, stage: int, task: int) -> Optional[float]:
        value = self.values[stage, task]
        return None if np.isnan(value) else float(value)

    def row(self, stage: int) -> list[float]:
        return [float(v) for v in self.values[stage, : stage + 1]]

    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.values[np.tril_indices(self.n_tasks)])))

    def entries(self) -> list[tuple[int, int, float]]:
        return [
            (s, t, float(self.values[s, t]))
            for s in range(self.n_tasks)
            for t in range(s + 1)
            if not np.isnan(self.values[s, t])
        ]

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(MATRIX_FIELDS)
            for stage, task, accuracy in self.entries():
                writer.writerow((stage, task, repr(accuracy)))

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "AccuracyMatrix":
        path = Path(path)
        with path.open(encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != MATRIX_FIELDS:
                raise FormatError(path, f"expected columns {','.join(MATRIX_FIELDS)}")
            try:
                rows = [(int(r["stage"]), int(r["task"]), float(r["accuracy"])) for r in reader]
            except ValueError as e:
                raise FormatError(path, str(e)) from e
        if not rows:
            raise FormatError(path, "accuracy matrix is empty")
        matrix = cls(max(stage for stage, _, _ in rows) + 1)
        for stage, task, accuracy in rows:
            matrix.record(stage, task, accuracy)
        return matrix


@dataclass
class Metrics:
    average_accuracy: float
    final_accuracies: list[float]
    forgetting: list[float] = field(default_factory=list)

    @property
    def average_forgetting(self) -> Optional[float]:
        return float(np.mean(self.forgetting)) if self.forgetting else None


def compute_metrics(matrix: AccuracyMatrix) -> Metrics:
    """Average of the final row and per-task forgetting.

    forgetting(i) = max over earlier stages of a[stage][i] minus the final
    a[T][i], for every task but the last.
    """
    if not matrix.is_complete():
        raise ContractViolation("accuracy matrix is not fully lower-triangular")
    last = matrix.n_tasks - 1
    final = matrix.row(last)
    forgetting = [
        float(max(matrix.values[s, i] for s in range(i, last)) - matrix.values[last, i])
        for i in range(last)
    ]
    return Metrics(float(np.mean(final)), final, forgetting)


def silhouette(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton groups score 0, as does any point with a = b = 0.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if points.ndim != 2 or len(points) != len(labels):
        raise ContractViolation("silhouette needs one label per embedding row")
    groups = np.unique(labels)
    if len(groups) < 2:
        raise ContractViolation("silhouette needs at least two groups")
    diff = points[:, None, :] - points[None, :, :]
    distances = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    members = labels[None, :] == groups[:, None]
    sizes = members.sum(axis=1)
    # sum of distances from every point to every group
    group_sums = distances @ members.T.astype(np.float64)
    own = np.searchsorted(groups, labels)
    rows = np.arange(len(points))
    own_sizes = sizes[own]
    a = np.where(own_sizes > 1, group_sums[rows, own] / np.maximum(own_sizes - 1, 1), 0.0)
    means = group_sums / sizes[None, :]
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    scores = np.where((own_sizes > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(scores.mean())


@dataclass
class RunReport:
    """Summary of one continual run, as written to ``metrics.json``."""

    scenario: str
    order: list[int]
    final_accuracies: list[float]
    average_accuracy: float
    forgetting: list[float]
    oracle_accuracies: list[float]
    seed: int
    config: dict[str, Any]
    silhouette: Optional[float] = None

    @classmethod
    def build(
        cls,
        matrix: AccuracyMatrix,
        scenario: str,
        order: list[int],
        oracle_accuracies: list[float],
        seed: int,
        config: dict[str, Any],
    ) -> "RunReport":
        metrics = compute_metrics(matrix)
        return cls(
            scenario=scenario,
            order=list(order),
            final_accuracies=metrics.final_accuracies,
            average_accuracy=metrics.average_accuracy,
            forgetting=metrics.forgetting,
            oracle_accuracies=list(oracle_accuracies),
            seed=seed,
            config=config,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunReport":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})
